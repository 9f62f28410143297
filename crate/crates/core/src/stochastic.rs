//! Compound-Poisson jump simulation, Brownian increments, and the
//! discretized forward state process with analytic jump compensators.
//!
//! Randomness is organized as counter-style streams: every trajectory of
//! every iteration draws from its own ChaCha stream keyed by
//! `(seed, purpose, iteration, trajectory)`. Output therefore depends only
//! on the seed and the parameters, never on scheduling or batch order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Uniform};
use thiserror::Error;

use crate::problems::ProblemSpec;

#[derive(Debug, Error)]
pub enum StochasticError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("divergent compensator integral: {0}")]
    DivergentCompensator(String),
    #[error("unsupported law: {0}")]
    UnsupportedLaw(String),
    #[error("simulation diverged at trajectory {trajectory}, step {step}")]
    SimulationDiverged { trajectory: usize, step: usize },
}

type Result<T> = std::result::Result<T, StochasticError>;

/// Stream-purpose tags keeping independent uses of the seed apart.
pub mod purpose {
    /// Forward path simulation during training; one stream per
    /// `(iteration, trajectory)`.
    pub const SIMULATION: u64 = 1;
    /// Network weight initialization.
    pub const NET_INIT: u64 = 2;
    /// The randomly generated terminal-state buffer of iteration 0.
    pub const BUFFER_INIT: u64 = 3;
    /// Post-training sample paths written to the trajectory CSV.
    pub const TRAJECTORIES: u64 = 4;
}

/// Deterministic RNG stream for `(seed, purpose, iteration, index)`.
pub fn stream_rng(seed: u64, purpose: u64, iteration: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    key[16..24].copy_from_slice(&iteration.to_le_bytes());
    key[24..32].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Jump-size distribution φ(z).
///
/// The four scalar laws produce one-dimensional jumps; `ConstantVector` is
/// the point mass at `(c, …, c)` used by the high-dimensional problems.
#[derive(Debug, Clone, PartialEq)]
pub enum JumpLaw {
    Normal { mu: f64, sigma: f64 },
    Uniform { delta: f64 },
    Exponential { lambda0: f64 },
    Bernoulli { a1: f64, a2: f64, p: f64 },
    ConstantVector { c: f64, d: usize },
}

impl JumpLaw {
    pub fn validate(&self) -> Result<()> {
        match *self {
            JumpLaw::Normal { sigma, .. } if sigma <= 0.0 => {
                Err(StochasticError::InvalidParameter(format!(
                    "normal law needs sigma > 0, got {sigma}"
                )))
            }
            JumpLaw::Uniform { delta } if delta <= 0.0 => Err(StochasticError::InvalidParameter(
                format!("uniform law needs delta > 0, got {delta}"),
            )),
            JumpLaw::Exponential { lambda0 } if lambda0 <= 0.0 => {
                Err(StochasticError::InvalidParameter(format!(
                    "exponential law needs lambda0 > 0, got {lambda0}"
                )))
            }
            JumpLaw::Bernoulli { p, .. } if !(0.0..=1.0).contains(&p) => {
                Err(StochasticError::InvalidParameter(format!(
                    "bernoulli law needs 0 <= p <= 1, got {p}"
                )))
            }
            JumpLaw::ConstantVector { d: 0, .. } => Err(StochasticError::InvalidParameter(
                "constant law needs d >= 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Dimension of one jump sample.
    pub fn dim(&self) -> usize {
        match *self {
            JumpLaw::ConstantVector { d, .. } => d,
            _ => 1,
        }
    }
}

/// One jump on a trajectory: its arrival time and its size vector.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpRecord {
    pub time: f64,
    pub size: Vec<f64>,
}

/// A batch of simulated forward trajectories.
///
/// `states` holds `M×(N+1)×d` grid values of the state process, `brownian`
/// the `M×N×d` increments that produced them. The same increments feed the
/// reward terms later; they are never resampled in between.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub trajectories: usize,
    pub steps: usize,
    pub dim: usize,
    pub horizon: f64,
    states: Vec<f64>,
    brownian: Vec<f64>,
    pub jumps: Vec<Vec<JumpRecord>>,
}

impl PathBatch {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// State of trajectory `j` at grid time `t_n`.
    pub fn state(&self, j: usize, n: usize) -> &[f64] {
        let d = self.dim;
        let base = (j * (self.steps + 1) + n) * d;
        &self.states[base..base + d]
    }

    /// Brownian increment of trajectory `j` over `(t_n, t_{n+1}]`.
    pub fn increment(&self, j: usize, n: usize) -> &[f64] {
        let d = self.dim;
        let base = (j * self.steps + n) * d;
        &self.brownian[base..base + d]
    }

    /// Terminal states as an `M×d` row-major matrix.
    pub fn terminal_states(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trajectories * self.dim);
        for j in 0..self.trajectories {
            out.extend_from_slice(self.state(j, self.steps));
        }
        out
    }

    /// Index of the interval `(t_n, t_{n+1}]` a jump time falls in.
    /// Times landing exactly on a grid point belong to the interval that
    /// ends there.
    pub fn interval_of(time: f64, dt: f64, steps: usize) -> usize {
        let idx = (time / dt).ceil() as usize;
        idx.saturating_sub(1).min(steps - 1)
    }
}

/// Strictly increasing compound-Poisson arrival times in `(0, T]`:
/// cumulative sums of i.i.d. Exponential(λ) gaps, truncated at the horizon.
pub fn sample_jump_times(lambda: f64, horizon: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(StochasticError::InvalidParameter(format!(
            "jump intensity must be >= 0, got {lambda}"
        )));
    }
    if horizon <= 0.0 || !horizon.is_finite() {
        return Err(StochasticError::InvalidParameter(format!(
            "horizon must be > 0, got {horizon}"
        )));
    }
    let mut times = Vec::new();
    if lambda == 0.0 {
        return Ok(times);
    }
    let gap = Exp::new(lambda).expect("lambda > 0");
    let mut t = gap.sample(rng);
    while t <= horizon {
        times.push(t);
        t += gap.sample(rng);
    }
    Ok(times)
}

/// One draw from φ(z).
pub fn sample_jump_size(law: &JumpLaw, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match *law {
        JumpLaw::Normal { mu, sigma } => {
            vec![Normal::new(mu, sigma).expect("validated").sample(rng)]
        }
        JumpLaw::Uniform { delta } => {
            vec![Uniform::new_inclusive(-delta, delta)
                .expect("validated")
                .sample(rng)]
        }
        JumpLaw::Exponential { lambda0 } => {
            vec![Exp::new(lambda0).expect("validated").sample(rng)]
        }
        JumpLaw::Bernoulli { a1, a2, p } => {
            let u: f64 = rng.random();
            vec![if u < p { a1 } else { a2 }]
        }
        JumpLaw::ConstantVector { c, d } => vec![c; d],
    }
}

/// `E[e^Z] − 1` under φ, the closed-form factor of the compensator of
/// `G(x,z) = x(e^z − 1)`.
pub fn compensator_exp_moment(law: &JumpLaw) -> Result<f64> {
    law.validate()?;
    match *law {
        JumpLaw::Normal { mu, sigma } => Ok((mu + 0.5 * sigma * sigma).exp_m1()),
        JumpLaw::Uniform { delta } => Ok(delta.sinh() / delta - 1.0),
        JumpLaw::Exponential { lambda0 } => {
            if lambda0 <= 1.0 {
                Err(StochasticError::DivergentCompensator(format!(
                    "E[e^Z] diverges for the exponential law unless lambda0 > 1, got {lambda0}"
                )))
            } else {
                Ok(1.0 / (lambda0 - 1.0))
            }
        }
        JumpLaw::Bernoulli { a1, a2, p } => Ok(p * a1.exp() + (1.0 - p) * a2.exp() - 1.0),
        JumpLaw::ConstantVector { .. } => Err(StochasticError::UnsupportedLaw(
            "the constant vector law pairs with G(x,z) = z; use compensator_mean".into(),
        )),
    }
}

/// `E[Z]` under φ, the compensator of `G(x,z) = z`. A vector for the
/// constant law, a single component otherwise.
pub fn compensator_mean(law: &JumpLaw) -> Result<Vec<f64>> {
    law.validate()?;
    Ok(match *law {
        JumpLaw::Normal { mu, .. } => vec![mu],
        JumpLaw::Uniform { .. } => vec![0.0],
        JumpLaw::Exponential { lambda0 } => vec![1.0 / lambda0],
        JumpLaw::Bernoulli { a1, a2, p } => vec![p * a1 + (1.0 - p) * a2],
        JumpLaw::ConstantVector { c, d } => vec![c; d],
    })
}

/// Draws for one trajectory: Brownian increments first, then jump times,
/// then sizes in arrival order. The fixed order is part of the
/// reproducibility contract.
fn sample_trajectory_noise(
    problem: &ProblemSpec,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<JumpRecord>)> {
    let d = problem.dim;
    let dt = problem.horizon / steps as f64;
    let normal = Normal::new(0.0, dt.sqrt()).expect("dt > 0");
    let mut brownian = Vec::with_capacity(steps * d);
    for _ in 0..steps * d {
        brownian.push(normal.sample(rng));
    }
    let times = sample_jump_times(problem.lambda, problem.horizon, rng)?;
    let jumps = times
        .into_iter()
        .map(|time| JumpRecord {
            time,
            size: sample_jump_size(&problem.law, rng),
        })
        .collect();
    Ok((brownian, jumps))
}

/// Simulate `trajectories` paths of the discretized forward process:
///
/// `X_{n+1} = X_n + b(X_n)Δt + σ(X_n)ΔW_n + Σ_jumps G(X_n, z_i) − Δt·λ·∫G(X_n,z)φ(z)dz`
///
/// with all jumps of an interval applied at the state frozen at its left
/// endpoint.
pub fn simulate_batch(
    problem: &ProblemSpec,
    trajectories: usize,
    steps: usize,
    seed: u64,
    purpose: u64,
    iteration: u64,
) -> Result<PathBatch> {
    if trajectories == 0 || steps == 0 {
        return Err(StochasticError::InvalidParameter(format!(
            "need trajectories >= 1 and steps >= 1, got {trajectories} and {steps}"
        )));
    }
    let d = problem.dim;
    let dt = problem.horizon / steps as f64;

    let mut states = vec![0.0; trajectories * (steps + 1) * d];
    let mut brownian = vec![0.0; trajectories * steps * d];
    let mut jumps = Vec::with_capacity(trajectories);

    let mut x_next = vec![0.0; d];
    let mut scratch = vec![0.0; d];

    for j in 0..trajectories {
        let mut rng = stream_rng(seed, purpose, iteration, j as u64);
        let (noise, traj_jumps) = sample_trajectory_noise(problem, steps, &mut rng)?;
        brownian[j * steps * d..(j + 1) * steps * d].copy_from_slice(&noise);

        let base = j * (steps + 1) * d;
        states[base..base + d].copy_from_slice(&problem.initial_point);

        let mut jump_cursor = 0usize;
        for n in 0..steps {
            let (done, rest) = states[base..].split_at_mut((n + 1) * d);
            let x: &[f64] = &done[n * d..];
            let x_out = &mut rest[..d];
            x_next.copy_from_slice(x);

            problem.drift.add_scaled(x, dt, &mut x_next);
            let dw = &noise[n * d..(n + 1) * d];
            problem.diffusion.add_apply(x, dw, &mut x_next);

            // Jumps in (t_n, t_{n+1}], applied at the frozen state.
            while jump_cursor < traj_jumps.len() {
                let rec: &JumpRecord = &traj_jumps[jump_cursor];
                if PathBatch::interval_of(rec.time, dt, steps) != n {
                    break;
                }
                problem.jump_coeff.add_apply(x, &rec.size, &mut x_next);
                jump_cursor += 1;
            }

            // Analytic compensator drift −Δt·λ·E[G(X_n, Z)].
            problem.compensator.eval(x, &mut scratch);
            for (xv, &cv) in x_next.iter_mut().zip(&scratch) {
                *xv -= dt * problem.lambda * cv;
            }

            if !x_next.iter().all(|v| v.is_finite()) {
                return Err(StochasticError::SimulationDiverged {
                    trajectory: j,
                    step: n,
                });
            }
            x_out.copy_from_slice(&x_next);
        }
        jumps.push(traj_jumps);
    }

    Ok(PathBatch {
        trajectories,
        steps,
        dim: d,
        horizon: problem.horizon,
        states,
        brownian,
        jumps,
    })
}
