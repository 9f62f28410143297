use levytd::problems;
use levytd::trainer::{train, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let problem = problems::highdim(10, 0.0, 0.3, 0.3, 0.1).unwrap();
    let opts = TrainOptions {
        trajectories: 500,
        intervals: 50,
        iterations,
        log_every: 500,
        ..TrainOptions::default()
    };
    let mut last = f64::NAN;
    train(&problem, &opts, |r| {
        last = r.y0_rel_error;
        println!("update {:5} y0 {:.4} rel {:.3}% l1 {:.2e} l2 {:.2e} l3 {:.2e} l4 {:.2e} {:.0}s",
                 r.update, r.y0_estimate, r.y0_rel_error * 100.0,
                 r.loss.loss1, r.loss.loss2, r.loss.loss3, r.loss.loss4, r.seconds);
    })
    .unwrap();
    println!("HD FINAL rel {:.4}%", last * 100.0);
}
