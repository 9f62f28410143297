use levytd::problems;
use levytd::stochastic::JumpLaw;
use levytd::trainer::{train, TrainOptions};

fn run(tag: &str, problem: &levytd::problems::ProblemSpec, m: usize, n: usize, iters: usize, seed: u64) {
    let opts = TrainOptions {
        trajectories: m,
        intervals: n,
        iterations: iters,
        seed,
        log_every: 1000,
        ..TrainOptions::default()
    };
    let mut last = f64::NAN;
    train(problem, &opts, |r| last = r.y0_rel_error).unwrap();
    println!("{tag} seed {seed}: final rel {:.4}%", last * 100.0);
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2023);
    match which.as_str() {
        "c2" => {
            for (name, law) in [
                ("normal", JumpLaw::Normal { mu: 0.4, sigma: 0.25 }),
                ("uniform", JumpLaw::Uniform { delta: 0.4 }),
                ("exponential", JumpLaw::Exponential { lambda0: 3.0 }),
                ("bernoulli", JumpLaw::Bernoulli { a1: -0.2, a2: 0.4, p: 0.7 }),
            ] {
                let p = problems::robustness_1d(0.0, 0.4, 0.3, law).unwrap();
                run(&format!("c2-{name}"), &p, 250, 50, 400, seed);
            }
        }
        "c3" => {
            let p = problems::robustness_1d(0.25, 0.0, 0.3, JumpLaw::Normal { mu: 0.4, sigma: 0.25 }).unwrap();
            run("c3", &p, 250, 40, 500, seed);
        }
        "c5b" => {
            let p = problems::robustness_1d(0.25, 0.4, 0.3, JumpLaw::Normal { mu: 0.4, sigma: 0.25 }).unwrap();
            run("c5b", &p, 250, 60, 500, seed);
        }
        other => eprintln!("unknown probe {other}"),
    }
}
