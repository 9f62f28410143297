use levytd::problems;
use levytd::trainer::{train, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2023);
    let iterations: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(400);
    let m: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let problem = problems::pure_jump_1d(0.3, 0.4, 0.25).unwrap();
    let opts = TrainOptions {
        trajectories: m,
        intervals: 50,
        iterations,
        seed,
        log_every: 500,
        ..TrainOptions::default()
    };
    let mut min_by_5000 = f64::INFINITY;
    let mut last = f64::NAN;
    train(&problem, &opts, |r| {
        if r.update <= 5000 && r.update > 0 {
            min_by_5000 = min_by_5000.min(r.y0_rel_error);
        }
        last = r.y0_rel_error;
        println!("seed {seed} update {:6} y0 {:.5} rel {:.4}%", r.update, r.y0_estimate, r.y0_rel_error * 100.0);
    })
    .unwrap();
    println!("SEED {seed} FINAL rel {:.4}% min_by_5000 {:.4}%", last * 100.0, min_by_5000 * 100.0);
}
