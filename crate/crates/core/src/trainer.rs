//! Per-time-step temporal-difference training.
//!
//! One optimizer step processes a window of `td_step` consecutive
//! transitions: the TD residual couples the window's endpoints, rewards
//! accumulate over its interior steps, and the terminal losses are evaluated
//! against the previous iteration's terminal-state buffer. All four loss
//! components live on one tape per step, so the optimizer differentiates
//! through everything they touch, including the recorded spatial-gradient
//! computation behind the `σᵀ∇𝒩₁` and terminal-gradient terms.

use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{AutodiffError, BufferPool, NodeId, Tape, Tensor};
use crate::network::{BoundNet, Net, NetConfig, NetworkError};
use crate::problems::ProblemSpec;
use crate::stochastic::{purpose, simulate_batch, stream_rng, PathBatch, StochasticError};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid training option: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}, step {step} (update {update})")]
    Diverged {
        iteration: usize,
        step: usize,
        update: usize,
    },
    #[error("non-finite gradient at update {update}")]
    NonFiniteGradient { update: usize },
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

type Result<T> = std::result::Result<T, TrainerError>;

/// Hyperparameters of one training run. The defaults mirror the benchmark
/// setup: Adam at 5e-5 divided by 5 every 5000 updates, seed 2023.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub trajectories: usize,
    pub intervals: usize,
    pub iterations: usize,
    pub td_step: usize,
    pub seed: u64,
    pub lr0: f64,
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub log_every: usize,
    /// Treat 𝒩₁ at the window's far endpoint as a constant target instead
    /// of differentiating through it.
    pub stop_gradient_target: bool,
    /// Record which buffer version each optimizer step consumed.
    pub trace_buffer: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            trajectories: 1000,
            intervals: 50,
            iterations: 400,
            td_step: 1,
            seed: 2023,
            lr0: 5e-5,
            lr_drop_every: 5000,
            lr_drop_factor: 5.0,
            log_every: 500,
            stop_gradient_target: false,
            trace_buffer: false,
        }
    }
}

/// The four loss components of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub loss4: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(loss1: f64, loss2: f64, loss3: f64, loss4: f64) -> Self {
        LossBreakdown {
            loss1,
            loss2,
            loss3,
            loss4,
            total: loss1 + loss2 + loss3 + loss4,
        }
    }

    fn nan() -> Self {
        LossBreakdown {
            loss1: f64::NAN,
            loss2: f64::NAN,
            loss3: f64::NAN,
            loss4: f64::NAN,
            total: f64::NAN,
        }
    }
}

/// One logging event.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub update: usize,
    pub y0_estimate: f64,
    pub y0_rel_error: f64,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub seconds: f64,
}

/// Which terminal buffer an optimizer step consumed (−1 is the randomly
/// generated buffer of iteration 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufferUse {
    pub iteration: usize,
    pub window_start: usize,
    pub buffer_iteration: i64,
}

/// Mutable training state: network, Adam moments, schedule position, and
/// the previous-iteration terminal-state buffer.
#[derive(Debug)]
pub struct TrainState {
    pub net: Net,
    adam_m: Vec<Tensor>,
    adam_v: Vec<Tensor>,
    pub update_count: usize,
    pub lr: f64,
    /// `M×d` row-major terminal states of the previous iteration.
    pub terminal_buffer: Vec<f64>,
    pub buffer_trace: Vec<BufferUse>,
}

impl TrainState {
    pub fn new(net: Net, terminal_buffer: Vec<f64>, lr0: f64) -> Self {
        let adam_m = (0..net.param_count())
            .map(|i| {
                let [r, c] = net.param(i).shape();
                Tensor::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let adam_v = adam_m.clone();
        TrainState {
            net,
            adam_m,
            adam_v,
            update_count: 0,
            lr: lr0,
            terminal_buffer,
            buffer_trace: Vec::new(),
        }
    }

    /// One Adam update (β₁ = 0.9, β₂ = 0.999, ε = 1e-8, bias-corrected),
    /// with the step-decay learning rate applied before the step.
    pub fn adam_step(&mut self, grads: &[Option<&[f64]>], opts: &TrainOptions) -> Result<()> {
        let lr = learning_rate(
            opts.lr0,
            opts.lr_drop_factor,
            opts.lr_drop_every,
            self.update_count,
        );
        let t = self.update_count as i32 + 1;
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TrainerError::NonFiniteGradient {
                    update: self.update_count,
                });
            }
            adam_update(
                self.net.param_mut(i).data_mut(),
                self.adam_m[i].data_mut(),
                self.adam_v[i].data_mut(),
                g,
                lr,
                t,
            );
        }
        self.update_count += 1;
        self.lr = learning_rate(
            opts.lr0,
            opts.lr_drop_factor,
            opts.lr_drop_every,
            self.update_count,
        );
        Ok(())
    }
}

/// lr₀ / factor^⌊updates / every⌋
pub fn learning_rate(lr0: f64, factor: f64, every: usize, updates: usize) -> f64 {
    lr0 / factor.powi((updates / every) as i32)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, t: i32) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Pointwise evaluation interface for the TD quantities. Implemented by
/// [`Net`] and, in tests, by exact-solution oracles.
pub trait PointEvaluator {
    fn n1(&self, t: f64, x: &[f64]) -> f64;
    fn n2(&self, t: f64, x: &[f64]) -> f64;
    fn grad_n1(&self, t: f64, x: &[f64]) -> Vec<f64>;
}

impl PointEvaluator for Net {
    fn n1(&self, t: f64, x: &[f64]) -> f64 {
        self.forward_values(t, x, x.len()).expect("forward").0[0]
    }

    fn n2(&self, t: f64, x: &[f64]) -> f64 {
        self.forward_values(t, x, x.len()).expect("forward").1[0]
    }

    fn grad_n1(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.grad_x_n1(t, x, x.len()).expect("gradient")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jump indices grouped by the interval their arrival time falls in.
fn bin_jumps(batch: &PathBatch) -> Vec<Vec<(usize, usize)>> {
    let dt = batch.dt();
    let mut bins = vec![Vec::new(); batch.steps];
    for (j, jumps) in batch.jumps.iter().enumerate() {
        for (i, rec) in jumps.iter().enumerate() {
            bins[PathBatch::interval_of(rec.time, dt, batch.steps)].push((j, i));
        }
    }
    bins
}

/// Per-sample one-transition TD error at step `n`:
///
/// `−fΔt + (σᵀ∇𝒩₁)ᵀΔW + Σ_i[𝒩₁(t_n, x+G(x,z_i)) − 𝒩₁(t_n, x)] − Δt𝒩₂(t_n,x)
///  + 𝒩₁(t_n, x_n) − 𝒩₁(t_{n+1}, x_{n+1})`
pub fn td_error(
    eval: &dyn PointEvaluator,
    problem: &ProblemSpec,
    batch: &PathBatch,
    step: usize,
) -> Vec<f64> {
    let dt = batch.dt();
    let t_n = step as f64 * dt;
    let t_next = (step + 1) as f64 * dt;
    let bins = bin_jumps(batch);

    (0..batch.trajectories)
        .map(|j| {
            let x = batch.state(j, step);
            let x_next = batch.state(j, step + 1);
            let dw = batch.increment(j, step);

            let n1 = eval.n1(t_n, x);
            let n2 = eval.n2(t_n, x);
            let grad = eval.grad_n1(t_n, x);
            let w = problem.diffusion.apply_transpose(x, &grad);
            let f = problem.driver.eval(t_n, x, n1, &w);

            let mut jump_sum = 0.0;
            for &(traj, idx) in &bins[step] {
                if traj != j {
                    continue;
                }
                let shifted = problem
                    .jump_coeff
                    .shifted_state(x, &batch.jumps[traj][idx].size);
                jump_sum += eval.n1(t_n, &shifted) - n1;
            }

            -f * dt + dot(&w, dw) + jump_sum - dt * n2 + n1 - eval.n1(t_next, x_next)
        })
        .collect()
}

/// Mean of squared per-sample TD errors.
pub fn loss1(td_errors: &[f64]) -> f64 {
    if td_errors.is_empty() {
        return 0.0;
    }
    td_errors.iter().map(|e| e * e).sum::<f64>() / td_errors.len() as f64
}

/// `(1/N)·mean_j |𝒩₁(T, x_T) − g(x_T)|²` over the terminal buffer.
pub fn loss2(
    eval: &dyn PointEvaluator,
    problem: &ProblemSpec,
    buffer: &[f64],
    intervals: usize,
) -> f64 {
    let d = problem.dim;
    let m = buffer.len() / d;
    let t = problem.horizon;
    let sum: f64 = (0..m)
        .map(|j| {
            let x = &buffer[j * d..(j + 1) * d];
            (eval.n1(t, x) - problem.terminal_value(x)).powi(2)
        })
        .sum();
    sum / (m * intervals) as f64
}

/// `(1/N)·mean_j ‖∇𝒩₁(T, x_T) − ∇g(x_T)‖²` over the terminal buffer.
pub fn loss3(
    eval: &dyn PointEvaluator,
    problem: &ProblemSpec,
    buffer: &[f64],
    intervals: usize,
) -> f64 {
    let d = problem.dim;
    let m = buffer.len() / d;
    let t = problem.horizon;
    let sum: f64 = (0..m)
        .map(|j| {
            let x = &buffer[j * d..(j + 1) * d];
            let grad = eval.grad_n1(t, x);
            let g_grad = problem.terminal_grad(x);
            grad.iter()
                .zip(&g_grad)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    sum / (m * intervals) as f64
}

/// `|mean_j (Σ_i[𝒩₁(t_n, x+G(x,z_i)) − 𝒩₁(t_n,x)] − Δt𝒩₂(t_n,x))|` —
/// the absolute value of the batch mean, not the mean of absolute values.
pub fn loss4(
    eval: &dyn PointEvaluator,
    problem: &ProblemSpec,
    batch: &PathBatch,
    step: usize,
) -> f64 {
    let dt = batch.dt();
    let t_n = step as f64 * dt;
    let bins = bin_jumps(batch);
    let mut mean = 0.0;
    for j in 0..batch.trajectories {
        let x = batch.state(j, step);
        let n1 = eval.n1(t_n, x);
        let mut inner = -dt * eval.n2(t_n, x);
        for &(traj, idx) in &bins[step] {
            if traj != j {
                continue;
            }
            let shifted = problem
                .jump_coeff
                .shifted_state(x, &batch.jumps[traj][idx].size);
            inner += eval.n1(t_n, &shifted) - n1;
        }
        mean += inner;
    }
    (mean / batch.trajectories as f64).abs()
}

/// Tape nodes of one optimizer step's loss.
struct WindowNodes {
    total: NodeId,
    #[cfg_attr(not(test), allow(dead_code))]
    td_row: NodeId,
    loss: LossBreakdown,
}

/// Assemble the window loss `[window_start, window_start + k)` on the tape.
#[allow(clippy::too_many_arguments)]
fn assemble_window(
    tape: &mut Tape,
    bound: &BoundNet,
    problem: &ProblemSpec,
    batch: &PathBatch,
    bins: &[Vec<(usize, usize)>],
    buffer: &[f64],
    window_start: usize,
    k: usize,
    stop_gradient_target: bool,
) -> Result<WindowNodes> {
    let d = problem.dim;
    let m_count = batch.trajectories;
    let n_total = batch.steps;
    let dt = batch.dt();

    // Column layout of the state-side forward: k+1 blocks of M state
    // columns, then one region of jump-shifted columns per window step.
    let events_per_step: Vec<&[(usize, usize)]> = (0..k)
        .map(|mm| bins[window_start + mm].as_slice())
        .collect();
    let total_events: usize = events_per_step.iter().map(|e| e.len()).sum();
    let ca = (k + 1) * m_count + total_events;

    let mut data = tape.take_buffer((d + 1) * ca);
    for (mm, col0) in (0..=k).map(|mm| (mm, mm * m_count)) {
        let t_m = (window_start + mm) as f64 * dt;
        for j in 0..m_count {
            let x = batch.state(j, window_start + mm);
            data[col0 + j] = t_m;
            for kk in 0..d {
                data[(kk + 1) * ca + col0 + j] = x[kk];
            }
        }
    }
    let mut jump_regions = Vec::with_capacity(k);
    let mut jump_indices: Vec<Arc<Vec<usize>>> = Vec::with_capacity(k);
    let mut cursor = (k + 1) * m_count;
    for (mm, events) in events_per_step.iter().enumerate() {
        let t_m = (window_start + mm) as f64 * dt;
        let start = cursor;
        let mut idx = Vec::with_capacity(events.len());
        for &(j, jump) in events.iter() {
            let x = batch.state(j, window_start + mm);
            let shifted = problem
                .jump_coeff
                .shifted_state(x, &batch.jumps[j][jump].size);
            data[cursor] = t_m;
            for kk in 0..d {
                data[(kk + 1) * ca + cursor] = shifted[kk];
            }
            idx.push(j);
            cursor += 1;
        }
        jump_regions.push((start, cursor));
        jump_indices.push(Arc::new(idx));
    }
    let input_a = tape.constant(Tensor::from_vec(d + 1, ca, data));
    let (n1a, n2a) = bound.forward(tape, input_a)?;

    // Spatial gradients of 𝒩₁ at the state columns, recorded on the tape.
    let need_gradx_a = !problem.diffusion.is_zero();
    let gradx_a = if need_gradx_a {
        let root = tape.sum_all(n1a);
        let adj = tape.backward_graph(root, &[input_a])?[&input_a];
        Some(tape.slice_rows(adj, 1, d + 1)?)
    } else {
        None
    };

    // Terminal-buffer forward and its spatial gradient.
    let mut data = tape.take_buffer((d + 1) * m_count);
    for j in 0..m_count {
        data[j] = problem.horizon;
        for kk in 0..d {
            data[(kk + 1) * m_count + j] = buffer[j * d + kk];
        }
    }
    let input_b = tape.constant(Tensor::from_vec(d + 1, m_count, data));
    let (n1b, _) = bound.forward(tape, input_b)?;
    let root_b = tape.sum_all(n1b);
    let adj_b = tape.backward_graph(root_b, &[input_b])?[&input_b];
    let gradx_b = tape.slice_rows(adj_b, 1, d + 1)?;

    // Loss² and Loss³ against the buffer, scaled by k/N for the window.
    let terminal_scale = k as f64 / (n_total * m_count) as f64;
    let mut g_vals = tape.take_buffer(m_count);
    let mut gg_vals = tape.take_buffer(d * m_count);
    for j in 0..m_count {
        let x = &buffer[j * d..(j + 1) * d];
        g_vals[j] = problem.terminal_value(x);
        for (kk, gv) in problem.terminal_grad(x).into_iter().enumerate() {
            gg_vals[kk * m_count + j] = gv;
        }
    }
    let g_const = tape.constant(Tensor::from_vec(1, m_count, g_vals));
    let gg_const = tape.constant(Tensor::from_vec(d, m_count, gg_vals));
    let diff2 = tape.sub(n1b, g_const)?;
    let ss2 = tape.sum_squares(diff2);
    let loss2_node = tape.scale(ss2, terminal_scale);
    let diff3 = tape.sub(gradx_b, gg_const)?;
    let ss3 = tape.sum_squares(diff3);
    let loss3_node = tape.scale(ss3, terminal_scale);

    // Rewards per window step; the TD row couples the window endpoints.
    let mut td_row: Option<NodeId> = None;
    let mut loss4_node: Option<NodeId> = None;
    for mm in 0..k {
        let sl0 = mm * m_count;
        let sl1 = (mm + 1) * m_count;
        let t_m = (window_start + mm) as f64 * dt;
        let n1_m = tape.slice_cols(n1a, sl0, sl1)?;
        let n2_m = tape.slice_cols(n2a, sl0, sl1)?;

        // Martingale residual Σ[𝒩₁(shift) − 𝒩₁] − Δt𝒩₂ of this step.
        let neg_dt_n2 = tape.scale(n2_m, -dt);
        let inner = if events_per_step[mm].is_empty() {
            neg_dt_n2
        } else {
            let (jr0, jr1) = jump_regions[mm];
            let shifts = tape.slice_cols(n1a, jr0, jr1)?;
            let gathered = tape.gather_cols(n1_m, jump_indices[mm].clone())?;
            let diffs = tape.sub(shifts, gathered)?;
            let jump_row = tape.scatter_add_cols(diffs, jump_indices[mm].clone(), m_count)?;
            tape.add(jump_row, neg_dt_n2)?
        };

        let mean_inner = tape.sum_all(inner);
        let scaled = tape.scale(mean_inner, 1.0 / m_count as f64);
        let l4 = tape.abs(scaled);
        loss4_node = Some(match loss4_node {
            Some(prev) => tape.add(prev, l4)?,
            None => l4,
        });

        // −fΔt as a constant row: the shipped drivers depend only on
        // (t, x), so they carry no parameter gradient.
        let n1_vals_start = sl0;
        let mut f_vals = tape.take_buffer(m_count);
        for (j, fv) in f_vals.iter_mut().enumerate() {
            let x = batch.state(j, window_start + mm);
            let y = tape.value(n1a).data()[n1_vals_start + j];
            let w = match &gradx_a {
                Some(gx) => {
                    let gv = tape.value(*gx);
                    let col: Vec<f64> = (0..d).map(|kk| gv.get(kk, sl0 + j)).collect();
                    problem.diffusion.apply_transpose(x, &col)
                }
                None => vec![0.0; d],
            };
            *fv = -problem.driver.eval(t_m, x, y, &w) * dt;
        }
        let f_const = tape.constant(Tensor::from_vec(1, m_count, f_vals));
        let mut reward = tape.add(f_const, inner)?;

        if let Some(gx) = gradx_a {
            // (σᵀ∇𝒩₁)ᵀΔW = ∇𝒩₁·(σΔW), with σΔW precomputed per sample.
            let gradx_m = tape.slice_cols(gx, sl0, sl1)?;
            let mut sdw = tape.take_buffer(d * m_count);
            for j in 0..m_count {
                let x = batch.state(j, window_start + mm);
                let dw = batch.increment(j, window_start + mm);
                for (kk, v) in problem.diffusion.apply(x, dw).into_iter().enumerate() {
                    sdw[kk * m_count + j] = v;
                }
            }
            let sdw_const = tape.constant(Tensor::from_vec(d, m_count, sdw));
            let prod = tape.hadamard(gradx_m, sdw_const)?;
            let brown_row = tape.sum_rows(prod);
            reward = tape.add(reward, brown_row)?;
        }

        td_row = Some(match td_row {
            Some(prev) => tape.add(prev, reward)?,
            None => reward,
        });
    }

    let n1_first = tape.slice_cols(n1a, 0, m_count)?;
    let n1_last = if stop_gradient_target {
        let mut vals = tape.take_buffer(m_count);
        for (j, v) in vals.iter_mut().enumerate() {
            *v = tape.value(n1a).data()[k * m_count + j];
        }
        tape.constant(Tensor::from_vec(1, m_count, vals))
    } else {
        tape.slice_cols(n1a, k * m_count, (k + 1) * m_count)?
    };
    let mut td = td_row.expect("k >= 1");
    td = tape.add(td, n1_first)?;
    td = tape.sub(td, n1_last)?;

    let ss1 = tape.sum_squares(td);
    let loss1_node = tape.scale(ss1, 1.0 / m_count as f64);
    let loss4_node = loss4_node.expect("k >= 1");

    let t12 = tape.add(loss1_node, loss2_node)?;
    let t123 = tape.add(t12, loss3_node)?;
    let total = tape.add(t123, loss4_node)?;

    let loss = LossBreakdown::new(
        tape.value(loss1_node).item(),
        tape.value(loss2_node).item(),
        tape.value(loss3_node).item(),
        tape.value(loss4_node).item(),
    );
    Ok(WindowNodes {
        total,
        td_row: td,
        loss,
    })
}

fn y0_estimate(net: &Net, problem: &ProblemSpec) -> f64 {
    net.forward_values(0.0, &problem.initial_point, problem.dim)
        .map(|(n1, _)| n1[0])
        .unwrap_or(f64::NAN)
}

fn rel_error(estimate: f64, exact: Option<f64>) -> f64 {
    match exact {
        Some(e) if e != 0.0 => ((estimate - e) / e).abs(),
        Some(e) => (estimate - e).abs(),
        None => f64::NAN,
    }
}

/// Run the training loop, emitting a metrics record at every logging event.
pub fn train(
    problem: &ProblemSpec,
    opts: &TrainOptions,
    mut on_metric: impl FnMut(&MetricsRecord),
) -> Result<TrainState> {
    if opts.trajectories == 0 || opts.intervals == 0 {
        return Err(TrainerError::Config(
            "need at least one trajectory and one interval".into(),
        ));
    }
    if opts.td_step == 0 || !opts.intervals.is_multiple_of(opts.td_step) {
        return Err(TrainerError::Config(format!(
            "td_step must divide the interval count: {} does not divide {}",
            opts.td_step, opts.intervals
        )));
    }
    if opts.log_every == 0 || opts.lr_drop_every == 0 || opts.lr_drop_factor <= 0.0 {
        return Err(TrainerError::Config(
            "log_every and lr_drop_every must be >= 1, lr_drop_factor > 0".into(),
        ));
    }

    let start = Instant::now();
    let config = NetConfig::for_dimension(problem.dim);
    let mut init_rng = stream_rng(opts.seed, purpose::NET_INIT, 0, 0);
    let net = Net::init(config, &mut init_rng)?;

    // The initial buffer comes from one untrained forward simulation, so it
    // already has the distribution the buffer holds ever after.
    let init_batch = simulate_batch(
        problem,
        opts.trajectories,
        opts.intervals,
        opts.seed,
        purpose::BUFFER_INIT,
        0,
    )?;
    let mut state = TrainState::new(net, init_batch.terminal_states(), opts.lr0);
    let mut buffer_version: i64 = -1;

    if opts.iterations == 0 {
        return Ok(state);
    }

    let exact = problem.y0_exact();
    let y0 = y0_estimate(&state.net, problem);
    on_metric(&MetricsRecord {
        iteration: 0,
        update: 0,
        y0_estimate: y0,
        y0_rel_error: rel_error(y0, exact),
        loss: LossBreakdown::nan(),
        lr: state.lr,
        seconds: start.elapsed().as_secs_f64(),
    });

    let k = opts.td_step;
    let mut pool = BufferPool::new();

    for iteration in 0..opts.iterations {
        let batch = simulate_batch(
            problem,
            opts.trajectories,
            opts.intervals,
            opts.seed,
            purpose::SIMULATION,
            iteration as u64,
        )?;
        let bins = bin_jumps(&batch);

        for window_start in (0..opts.intervals).step_by(k) {
            // The window containing the last transition refreshes the
            // buffer before the terminal losses are evaluated.
            if window_start + k >= opts.intervals {
                state.terminal_buffer = batch.terminal_states();
                buffer_version = iteration as i64;
            }
            if opts.trace_buffer {
                state.buffer_trace.push(BufferUse {
                    iteration,
                    window_start,
                    buffer_iteration: buffer_version,
                });
            }

            let mut tape = Tape::with_pool(std::mem::take(&mut pool));
            let bound = state.net.bind(&mut tape);
            let window = assemble_window(
                &mut tape,
                &bound,
                problem,
                &batch,
                &bins,
                &state.terminal_buffer,
                window_start,
                k,
                opts.stop_gradient_target,
            )?;

            if !window.loss.total.is_finite() {
                return Err(TrainerError::Diverged {
                    iteration,
                    step: window_start,
                    update: state.update_count,
                });
            }

            let grad_nodes = tape.backward_graph(window.total, bound.param_ids())?;
            let grads: Vec<Option<&[f64]>> = bound
                .param_ids()
                .iter()
                .map(|id| grad_nodes.get(id).map(|adj| tape.value(*adj).data()))
                .collect();
            state.adam_step(&grads, opts).map_err(|e| match e {
                TrainerError::NonFiniteGradient { update } => TrainerError::Diverged {
                    iteration,
                    step: window_start,
                    update,
                },
                other => other,
            })?;
            pool = tape.recycle();

            if state.update_count.is_multiple_of(opts.log_every) {
                let y0 = y0_estimate(&state.net, problem);
                on_metric(&MetricsRecord {
                    iteration,
                    update: state.update_count,
                    y0_estimate: y0,
                    y0_rel_error: rel_error(y0, exact),
                    loss: window.loss,
                    lr: state.lr,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
        }
    }

    Ok(state)
}
