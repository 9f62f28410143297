use levytd::problems;
use levytd::stochastic::{purpose, simulate_batch};
use levytd::trainer::{td_error, PointEvaluator};

struct ExactHighDim {
    lambda: f64,
    c: f64,
    d: usize,
}

impl PointEvaluator for ExactHighDim {
    fn n1(&self, _t: f64, x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() / self.d as f64
    }
    fn n2(&self, _t: f64, x: &[f64]) -> f64 {
        // lambda * (u(x + c vec) - u(x)) for the point mass law
        let sum_x: f64 = x.iter().sum();
        self.lambda * (2.0 * self.c * sum_x + self.d as f64 * self.c * self.c) / self.d as f64
    }
    fn grad_n1(&self, _t: f64, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| 2.0 * v / self.d as f64).collect()
    }
}

fn main() {
    let d = 10;
    let problem = problems::highdim(d, 0.0, 0.3, 0.3, 0.1).unwrap();
    let oracle = ExactHighDim { lambda: 0.3, c: 0.1, d };
    let m = 20000;
    let batch = simulate_batch(&problem, m, 50, 2023, purpose::SIMULATION, 0).unwrap();
    // terminal mean check: E X_T per coordinate should be 1 (martingale, eps=0)
    let mut mean_xt = vec![0.0; d];
    for j in 0..m {
        for (k, v) in batch.state(j, 50).iter().enumerate() {
            mean_xt[k] += v / m as f64;
        }
    }
    println!("mean X_T per coord: {:?}", &mean_xt[..3]);
    for step in [0usize, 10, 25, 49] {
        let td = td_error(&oracle, &problem, &batch, step);
        let mean: f64 = td.iter().sum::<f64>() / m as f64;
        let var: f64 = td.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let se = (var / m as f64).sqrt();
        let max = td.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        println!("step {step}: mean TD {mean:.3e} (se {se:.1e}, mean/se {:.2}), max |TD| {max:.3e}", mean / se);
    }
}
