//! The benchmark PIDE instances: coefficients, jump structure, terminal
//! data, driver, and exact solutions where known.
//!
//! Every instance is written against the canonical form
//!
//! `∂u/∂t + b·∇u + ½Tr(σσᵀH(u)) + ∫(u(t,x+G(x,z)) − u(t,x) − G(x,z)·∇u)ν(dz) + f = 0`
//!
//! with `u(T,·) = g`; source terms on the right-hand side of a displayed
//! equation become part of `f` with the sign flipped.

use std::fmt;
use std::sync::Arc;

use crate::stochastic::{compensator_exp_moment, compensator_mean, JumpLaw, StochasticError};

pub type Result<T> = std::result::Result<T, StochasticError>;

/// Shared vector-valued coefficient function of the state.
pub type StateFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Drift coefficient b(x).
#[derive(Clone)]
pub enum Drift {
    Zero,
    /// b(x) = coefficient·x
    LinearState(f64),
    Custom(StateFn),
}

impl Drift {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Drift::Zero => vec![0.0; x.len()],
            Drift::LinearState(c) => x.iter().map(|v| c * v).collect(),
            Drift::Custom(f) => f(x),
        }
    }

    /// `out += b(x)·scale`
    pub fn add_scaled(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Drift::Zero => {}
            Drift::LinearState(c) => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o += c * v * scale;
                }
            }
            Drift::Custom(f) => {
                for (o, v) in out.iter_mut().zip(f(x)) {
                    *o += v * scale;
                }
            }
        }
    }
}

/// Diffusion coefficient σ(x). All shipped problems use a constant multiple
/// of the identity; the `Custom` variant carries a full row-major `d×d`
/// matrix function for generality.
#[derive(Clone)]
pub enum Diffusion {
    /// σ(x) = θ·I
    ScalarIdentity(f64),
    /// Row-major d×d matrix function.
    Custom(StateFn),
}

impl Diffusion {
    pub fn is_zero(&self) -> bool {
        matches!(self, Diffusion::ScalarIdentity(theta) if *theta == 0.0)
    }

    /// `out += σ(x)·v`
    pub fn add_apply(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::ScalarIdentity(theta) => {
                for (o, &w) in out.iter_mut().zip(v) {
                    *o += theta * w;
                }
            }
            Diffusion::Custom(f) => {
                let m = f(x);
                let d = v.len();
                for i in 0..d {
                    let mut acc = 0.0;
                    for (j, &vj) in v.iter().enumerate() {
                        acc += m[i * d + j] * vj;
                    }
                    out[i] += acc;
                }
            }
        }
    }

    /// σ(x)·v
    pub fn apply(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.add_apply(x, v, &mut out);
        out
    }

    /// σ(x)ᵀ·v
    pub fn apply_transpose(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        match self {
            Diffusion::ScalarIdentity(theta) => v.iter().map(|w| theta * w).collect(),
            Diffusion::Custom(f) => {
                let m = f(x);
                let d = v.len();
                (0..d)
                    .map(|i| (0..d).map(|j| m[j * d + i] * v[j]).sum())
                    .collect()
            }
        }
    }
}

/// Jump coefficient G(x,z), with closed-form compensators per law.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JumpCoeff {
    /// G(x,z) = x(e^z − 1) for scalar problems; the post-jump state is x·e^z.
    MultiplicativeExpm1,
    /// G(x,z) = z.
    Additive,
}

impl JumpCoeff {
    /// `out += G(x, z)`
    pub fn add_apply(&self, x: &[f64], z: &[f64], out: &mut [f64]) {
        match self {
            JumpCoeff::MultiplicativeExpm1 => {
                out[0] += x[0] * z[0].exp_m1();
            }
            JumpCoeff::Additive => {
                for (o, &zv) in out.iter_mut().zip(z) {
                    *o += zv;
                }
            }
        }
    }

    /// The post-jump state x + G(x, z).
    pub fn shifted_state(&self, x: &[f64], z: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.add_apply(x, z, &mut out);
        out
    }

    /// E[G(x, Z)] under the law, evaluated analytically.
    pub fn compensator(&self, law: &JumpLaw) -> Result<Compensator> {
        match self {
            JumpCoeff::MultiplicativeExpm1 => {
                Ok(Compensator::ScaleState(compensator_exp_moment(law)?))
            }
            JumpCoeff::Additive => Ok(Compensator::Constant(compensator_mean(law)?)),
        }
    }
}

/// Precomputed ∫G(x,z)φ(z)dz as a function of the state.
#[derive(Debug, Clone, PartialEq)]
pub enum Compensator {
    /// E[G(x,Z)] = x·factor (multiplicative jumps).
    ScaleState(f64),
    /// E[G(x,Z)] independent of x (additive jumps).
    Constant(Vec<f64>),
}

impl Compensator {
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Compensator::ScaleState(factor) => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = factor * v;
                }
            }
            Compensator::Constant(c) => out.copy_from_slice(c),
        }
    }
}

/// Driver f(t, x, u, σᵀ∇u). The shipped problems ignore the `u` and
/// `σᵀ∇u` slots, but the signature carries them.
#[derive(Clone)]
pub enum Driver {
    Zero,
    /// f = −coefficient·x (one-dimensional).
    NegLinearState(f64),
    /// f = −(offset + scale·‖x‖²).
    NegOffsetPlusScaledNormSq { offset: f64, scale: f64 },
    #[allow(clippy::type_complexity)]
    Custom(Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>),
}

impl Driver {
    pub fn eval(&self, t: f64, x: &[f64], u: f64, sigma_t_grad_u: &[f64]) -> f64 {
        match self {
            Driver::Zero => 0.0,
            Driver::NegLinearState(c) => -c * x[0],
            Driver::NegOffsetPlusScaledNormSq { offset, scale } => {
                let norm_sq: f64 = x.iter().map(|v| v * v).sum();
                -(offset + scale * norm_sq)
            }
            Driver::Custom(f) => f(t, x, u, sigma_t_grad_u),
        }
    }
}

/// Terminal condition g and its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    /// g(x) = x (one-dimensional).
    IdentityScalar,
    /// g(x) = ‖x‖²/d.
    MeanSquareNorm,
}

impl Terminal {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Terminal::IdentityScalar => x[0],
            Terminal::MeanSquareNorm => x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64,
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Terminal::IdentityScalar => vec![1.0],
            Terminal::MeanSquareNorm => {
                let d = x.len() as f64;
                x.iter().map(|v| 2.0 * v / d).collect()
            }
        }
    }
}

/// Known exact solution u(t,x).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exact {
    /// u(t,x) = x.
    LinearState,
    /// u(t,x) = ‖x‖²/d.
    MeanSquareNorm,
}

impl Exact {
    pub fn eval(&self, _t: f64, x: &[f64]) -> f64 {
        match self {
            Exact::LinearState => x[0],
            Exact::MeanSquareNorm => x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64,
        }
    }
}

/// A PIDE instance ready for simulation and training.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: &'static str,
    pub dim: usize,
    pub horizon: f64,
    pub initial_point: Vec<f64>,
    pub lambda: f64,
    pub law: JumpLaw,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub jump_coeff: JumpCoeff,
    /// Analytic ∫G(x,z)φ(z)dz, fixed at construction.
    pub compensator: Compensator,
    pub driver: Driver,
    pub terminal: Terminal,
    pub exact: Option<Exact>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("lambda", &self.lambda)
            .field("law", &self.law)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn terminal_value(&self, x: &[f64]) -> f64 {
        self.terminal.eval(x)
    }

    pub fn terminal_grad(&self, x: &[f64]) -> Vec<f64> {
        self.terminal.grad(x)
    }

    pub fn exact_value(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.exact.map(|e| e.eval(t, x))
    }

    /// The reference value u(0, ξ).
    pub fn y0_exact(&self) -> Option<f64> {
        self.exact_value(0.0, &self.initial_point)
    }
}

/// One-dimensional pure jump benchmark: no drift, no diffusion,
/// multiplicative jumps with a normal law, exact solution u(t,x) = x.
pub fn pure_jump_1d(lambda: f64, mu: f64, sigma_jump: f64) -> Result<ProblemSpec> {
    let law = JumpLaw::Normal {
        mu,
        sigma: sigma_jump,
    };
    law.validate()?;
    let jump_coeff = JumpCoeff::MultiplicativeExpm1;
    let compensator = jump_coeff.compensator(&law)?;
    Ok(ProblemSpec {
        name: "pure_jump_1d",
        dim: 1,
        horizon: 1.0,
        initial_point: vec![1.0],
        lambda,
        law,
        drift: Drift::Zero,
        diffusion: Diffusion::ScalarIdentity(0.0),
        jump_coeff,
        compensator,
        driver: Driver::Zero,
        terminal: Terminal::IdentityScalar,
        exact: Some(Exact::LinearState),
    })
}

/// One-dimensional robustness benchmark with drift εx, diffusion θ, and a
/// caller-chosen scalar jump law; exact solution u(t,x) = x.
pub fn robustness_1d(epsilon: f64, theta: f64, lambda: f64, law: JumpLaw) -> Result<ProblemSpec> {
    law.validate()?;
    if law.dim() != 1 {
        return Err(StochasticError::UnsupportedLaw(
            "robustness_1d needs a scalar jump law".into(),
        ));
    }
    let jump_coeff = JumpCoeff::MultiplicativeExpm1;
    // Rejects the exponential law with λ₀ ≤ 1: its compensator diverges.
    let compensator = jump_coeff.compensator(&law)?;
    Ok(ProblemSpec {
        name: "robustness_1d",
        dim: 1,
        horizon: 1.0,
        initial_point: vec![1.0],
        lambda,
        law,
        drift: Drift::LinearState(epsilon),
        diffusion: Diffusion::ScalarIdentity(theta),
        jump_coeff,
        compensator,
        driver: Driver::NegLinearState(epsilon),
        terminal: Terminal::IdentityScalar,
        exact: Some(Exact::LinearState),
    })
}

/// d-dimensional benchmark with additive constant jumps and exact solution
/// u(t,x) = ‖x‖²/d. The initial point is (1, …, 1), which pins the exact
/// Y₀ at 1.
pub fn highdim(d: usize, epsilon: f64, theta: f64, lambda: f64, c: f64) -> Result<ProblemSpec> {
    if d == 0 {
        return Err(StochasticError::InvalidParameter(
            "highdim needs d >= 1".into(),
        ));
    }
    let law = JumpLaw::ConstantVector { c, d };
    law.validate()?;
    let jump_coeff = JumpCoeff::Additive;
    let compensator = jump_coeff.compensator(&law)?;
    Ok(ProblemSpec {
        name: "highdim",
        dim: d,
        horizon: 1.0,
        initial_point: vec![1.0; d],
        lambda,
        law,
        drift: Drift::LinearState(epsilon / 2.0),
        diffusion: Diffusion::ScalarIdentity(theta),
        jump_coeff,
        compensator,
        driver: Driver::NegOffsetPlusScaledNormSq {
            offset: lambda * c * c + theta * theta,
            scale: epsilon / d as f64,
        },
        terminal: Terminal::MeanSquareNorm,
        exact: Some(Exact::MeanSquareNorm),
    })
}

/// Parameters a problem family needs beyond its name.
#[derive(Debug, Clone)]
pub struct ProblemParams {
    pub d: usize,
    pub lambda: f64,
    pub law: JumpLaw,
    pub epsilon: f64,
    pub theta: f64,
}

/// Look up a shipped problem by its registry name.
pub fn by_name(name: &str, params: &ProblemParams) -> Result<ProblemSpec> {
    match name {
        "pure_jump_1d" => match params.law {
            JumpLaw::Normal { mu, sigma } => pure_jump_1d(params.lambda, mu, sigma),
            ref other => Err(StochasticError::UnsupportedLaw(format!(
                "pure_jump_1d is defined for the normal jump law, got {other:?}"
            ))),
        },
        "robustness_1d" => robustness_1d(
            params.epsilon,
            params.theta,
            params.lambda,
            params.law.clone(),
        ),
        "highdim" => match params.law {
            JumpLaw::ConstantVector { c, .. } => {
                highdim(params.d, params.epsilon, params.theta, params.lambda, c)
            }
            ref other => Err(StochasticError::UnsupportedLaw(format!(
                "highdim is defined for the constant jump law, got {other:?}"
            ))),
        },
        other => Err(StochasticError::InvalidParameter(format!(
            "unknown problem '{other}'; expected pure_jump_1d, robustness_1d, or highdim"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{sample_jump_size, stream_rng};
    use rand::Rng;

    #[test]
    fn pure_jump_defaults_have_exact_y0_of_one() {
        let p = pure_jump_1d(0.3, 0.4, 0.25).unwrap();
        assert_eq!(p.y0_exact(), Some(1.0));
        assert_eq!(p.dim, 1);
        assert_eq!(p.initial_point, vec![1.0]);
    }

    #[test]
    fn robustness_exact_y0_is_one_for_all_four_laws() {
        let laws = [
            JumpLaw::Normal {
                mu: 0.4,
                sigma: 0.25,
            },
            JumpLaw::Uniform { delta: 0.4 },
            JumpLaw::Exponential { lambda0: 3.0 },
            JumpLaw::Bernoulli {
                a1: -0.2,
                a2: 0.4,
                p: 0.7,
            },
        ];
        for law in laws {
            let p = robustness_1d(0.0, 0.4, 0.3, law).unwrap();
            assert_eq!(p.y0_exact(), Some(1.0));
        }
    }

    #[test]
    fn robustness_rejects_divergent_exponential_law() {
        let err = robustness_1d(0.0, 0.4, 0.3, JumpLaw::Exponential { lambda0: 0.9 });
        assert!(err.is_err());
    }

    #[test]
    fn highdim_exact_y0_is_one() {
        let p = highdim(100, 0.0, 0.3, 0.3, 0.1).unwrap();
        assert_eq!(p.y0_exact(), Some(1.0));
        assert_eq!(p.initial_point.len(), 100);
    }

    #[test]
    fn exact_matches_terminal_condition_at_horizon() {
        let mut rng = stream_rng(17, 0, 0, 0);
        let problems = [
            pure_jump_1d(0.3, 0.4, 0.25).unwrap(),
            robustness_1d(0.25, 0.4, 0.3, JumpLaw::Uniform { delta: 0.4 }).unwrap(),
            highdim(7, 0.2, 0.3, 0.3, 0.1).unwrap(),
        ];
        for p in &problems {
            for _ in 0..20 {
                let x: Vec<f64> = (0..p.dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let u_t = p.exact_value(p.horizon, &x).unwrap();
                let g = p.terminal_value(&x);
                assert!(
                    (u_t - g).abs() < 1e-14,
                    "{}: exact(T,x)={u_t} vs g={g}",
                    p.name
                );
            }
        }
    }

    #[test]
    fn highdim_nonlocal_term_is_lambda_c_squared() {
        let p = highdim(5, 0.0, 0.3, 0.3, 0.1).unwrap();
        let x = vec![0.3, -0.7, 1.1, 0.0, 2.0];
        // ∫(u(x+z) − u(x) − z·∇u)ν(dz) at the point-mass law.
        let z = vec![0.1; 5];
        let shifted = p.jump_coeff.shifted_state(&x, &z);
        let u = |x: &[f64]| p.exact_value(0.5, x).unwrap();
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v / 5.0).collect();
        let dot: f64 = z.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let nonlocal = p.lambda * (u(&shifted) - u(&x) - dot);
        assert!((nonlocal - 0.003).abs() < 1e-15, "nonlocal {nonlocal}");
    }

    /// Numeric PIDE residual of the exact solution at a point, using finite
    /// differences in (t, x) and quadrature/finite sums over the jump law.
    fn residual_at(p: &ProblemSpec, t: f64, x: &[f64]) -> f64 {
        let u = |t: f64, x: &[f64]| p.exact_value(t, x).unwrap();
        // Central differences are exact for the shipped polynomial
        // solutions, so a coarse step avoids cancellation noise.
        let h = 1e-3;

        let du_dt = (u(t + h, x) - u(t - h, x)) / (2.0 * h);

        let d = p.dim;
        let mut grad = vec![0.0; d];
        let mut trace_term = 0.0;
        let mut xp = x.to_vec();
        for i in 0..d {
            xp[i] = x[i] + h;
            let up = u(t, &xp);
            xp[i] = x[i] - h;
            let um = u(t, &xp);
            xp[i] = x[i];
            grad[i] = (up - um) / (2.0 * h);
            trace_term += (up - 2.0 * u(t, x) + um) / (h * h);
        }

        let b = p.drift.eval(x);
        let b_grad: f64 = b.iter().zip(&grad).map(|(a, g)| a * g).sum();

        let theta = match p.diffusion {
            Diffusion::ScalarIdentity(theta) => theta,
            _ => unreachable!("shipped problems use constant-diagonal diffusion"),
        };
        let diffusion_term = 0.5 * theta * theta * trace_term;

        // ∫ (u(t, x+G(x,z)) − u(t,x) − G(x,z)·∇u) λφ(z) dz
        let integrand = |z: &[f64]| {
            let shifted = p.jump_coeff.shifted_state(x, z);
            let mut g_vec = vec![0.0; d];
            p.jump_coeff.add_apply(x, z, &mut g_vec);
            let dot: f64 = g_vec.iter().zip(&grad).map(|(a, b)| a * b).sum();
            u(t, &shifted) - u(t, x) - dot
        };
        let simpson_grid = |lo: f64, hi: f64, n: usize, w: &dyn Fn(f64) -> f64| {
            let dz = (hi - lo) / n as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let a = lo + i as f64 * dz;
                let m = a + 0.5 * dz;
                let b = a + dz;
                acc += dz / 6.0
                    * (integrand(&[a]) * w(a) + 4.0 * integrand(&[m]) * w(m) + integrand(&[b]) * w(b));
            }
            acc
        };
        let nonlocal = p.lambda
            * match p.law {
                JumpLaw::Normal { mu, sigma } => {
                    let phi = move |z: f64| {
                        (-0.5 * ((z - mu) / sigma).powi(2)).exp()
                            / (sigma * (2.0 * std::f64::consts::PI).sqrt())
                    };
                    simpson_grid(mu - 12.0 * sigma, mu + 12.0 * sigma, 20_000, &phi)
                }
                JumpLaw::Uniform { delta } => {
                    simpson_grid(-delta, delta, 20_000, &move |_| 1.0 / (2.0 * delta))
                }
                JumpLaw::Exponential { lambda0 } => {
                    let hi = 50.0 / (lambda0 - 1.0).min(lambda0);
                    simpson_grid(0.0, hi, 40_000, &move |z| lambda0 * (-lambda0 * z).exp())
                }
                JumpLaw::Bernoulli { a1, a2, p: prob } => {
                    prob * integrand(&[a1]) + (1.0 - prob) * integrand(&[a2])
                }
                JumpLaw::ConstantVector { c, d } => integrand(&vec![c; d]),
            };

        let w = p.diffusion.apply_transpose(x, &grad);
        let f = p.driver.eval(t, x, u(t, x), &w);

        du_dt + b_grad + diffusion_term + nonlocal + f
    }

    #[test]
    fn exact_solutions_satisfy_their_pides() {
        let problems = [
            pure_jump_1d(0.3, 0.4, 0.25).unwrap(),
            robustness_1d(
                0.25,
                0.0,
                0.3,
                JumpLaw::Normal {
                    mu: 0.4,
                    sigma: 0.25,
                },
            )
            .unwrap(),
            robustness_1d(0.0, 0.4, 0.3, JumpLaw::Uniform { delta: 0.4 }).unwrap(),
            robustness_1d(0.0, 0.4, 0.3, JumpLaw::Exponential { lambda0: 3.0 }).unwrap(),
            robustness_1d(
                0.25,
                0.4,
                0.9,
                JumpLaw::Bernoulli {
                    a1: -0.2,
                    a2: 0.4,
                    p: 0.7,
                },
            )
            .unwrap(),
            highdim(6, 0.2, 0.3, 0.3, 0.1).unwrap(),
        ];
        let mut rng = stream_rng(23, 0, 0, 0);
        for p in &problems {
            for probe in 0..20 {
                let t = rng.random_range(0.0..1.0);
                let x: Vec<f64> = (0..p.dim).map(|_| rng.random_range(0.25..2.0)).collect();
                let r = residual_at(p, t, &x);
                assert!(
                    r.abs() < 1e-6,
                    "{} probe {probe}: residual {r} at t={t}, x={x:?}",
                    p.name
                );
            }
        }
    }

    #[test]
    fn pure_jump_operator_residual_at_x_two() {
        // The integrand of the non-local operator cancels pointwise for
        // u = x; check the quadrature sees that at x = 2.
        let p = pure_jump_1d(0.3, 0.4, 0.25).unwrap();
        let r = residual_at(&p, 0.3, &[2.0]);
        assert!(r.abs() < 1e-9, "residual {r}");
    }

    #[test]
    fn shifted_state_matches_multiplicative_form() {
        let mut rng = stream_rng(3, 0, 0, 0);
        let law = JumpLaw::Normal {
            mu: 0.4,
            sigma: 0.25,
        };
        for _ in 0..100 {
            let x = rng.random_range(0.1..3.0);
            let z = sample_jump_size(&law, &mut rng);
            let shifted = JumpCoeff::MultiplicativeExpm1.shifted_state(&[x], &z);
            assert!((shifted[0] - x * z[0].exp()).abs() < 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn registry_resolves_names_and_rejects_unknown() {
        let params = ProblemParams {
            d: 1,
            lambda: 0.3,
            law: JumpLaw::Normal {
                mu: 0.4,
                sigma: 0.25,
            },
            epsilon: 0.0,
            theta: 0.0,
        };
        assert_eq!(
            by_name("pure_jump_1d", &params).unwrap().name,
            "pure_jump_1d"
        );
        assert_eq!(
            by_name("robustness_1d", &params).unwrap().name,
            "robustness_1d"
        );
        let hd = ProblemParams {
            d: 10,
            law: JumpLaw::ConstantVector { c: 0.1, d: 10 },
            theta: 0.3,
            ..params.clone()
        };
        assert_eq!(by_name("highdim", &hd).unwrap().name, "highdim");
        assert!(by_name("unknown", &params).is_err());
    }
}
