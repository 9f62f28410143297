//! Two-output residual network.
//!
//! Input is (t, x) ∈ ℝ^{d+1}; a linear lift is followed by residual blocks
//! of two tanh layers each and a linear head to ℝ². The first output
//! approximates the solution u(t,x), the second the non-local jump term
//! ∫(u(t,x+G(x,z)) − u(t,x))ν(dz). One shared trunk serves both outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape, Tensor};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

type Result<T> = std::result::Result<T, NetworkError>;

/// Architecture descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// d + 1: time plus spatial coordinates.
    pub input_dim: usize,
    /// Hidden width of the lift and the residual blocks.
    pub width: usize,
    /// Number of residual blocks (two tanh layers each).
    pub blocks: usize,
}

impl NetConfig {
    /// The experiment default for spatial dimension `d`: width 25 in one
    /// dimension, `d + 10` otherwise; 5 residual blocks.
    pub fn for_dimension(d: usize) -> Self {
        NetConfig {
            input_dim: d + 1,
            width: if d == 1 { 25 } else { d + 10 },
            blocks: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 || self.width < 1 || self.blocks < 1 {
            return Err(NetworkError::InvalidConfig(format!(
                "need input_dim >= 2, width >= 1, blocks >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    tensor: Tensor,
}

/// The network parameters: lift, `blocks` residual blocks, head.
#[derive(Debug, Clone)]
pub struct Net {
    pub config: NetConfig,
    params: Vec<Param>,
}

/// Uniform(−1/√fan_in, 1/√fan_in) weight matrix; biases start at zero.
fn init_weight(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

impl Net {
    /// Fresh network; weights are drawn in a fixed order (lift, blocks in
    /// sequence, head), row-major within each matrix.
    pub fn init(config: NetConfig, rng: &mut ChaCha8Rng) -> Result<Net> {
        config.validate()?;
        let (din, w) = (config.input_dim, config.width);
        let mut params = Vec::new();
        let mut push = |name: String, tensor: Tensor| params.push(Param { name, tensor });

        push("lift.w".into(), init_weight(w, din, rng));
        push("lift.b".into(), Tensor::zeros(w, 1));
        for b in 0..config.blocks {
            push(format!("block{b}.w1"), init_weight(w, w, rng));
            push(format!("block{b}.b1"), Tensor::zeros(w, 1));
            push(format!("block{b}.w2"), init_weight(w, w, rng));
            push(format!("block{b}.b2"), Tensor::zeros(w, 1));
        }
        push("head.w".into(), init_weight(2, w, rng));
        push("head.b".into(), Tensor::zeros(2, 1));

        Ok(Net { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.data().len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, i: usize) -> &Tensor {
        &self.params[i].tensor
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].tensor
    }

    pub fn param_name(&self, i: usize) -> &str {
        &self.params[i].name
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn param_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    /// Register all parameters as gradient-requiring leaves on a tape.
    pub fn bind(&self, tape: &mut Tape) -> BoundNet {
        let ids = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), true))
            .collect();
        BoundNet {
            config: self.config,
            ids,
        }
    }

    /// Build the `(d+1)×M` input matrix for a single time and an `M×d`
    /// row-major batch of states.
    pub fn input_matrix(t: f64, states: &[f64], d: usize) -> Tensor {
        assert_eq!(states.len() % d, 0);
        let m = states.len() / d;
        let mut data = vec![0.0; (d + 1) * m];
        data[..m].fill(t);
        for j in 0..m {
            for k in 0..d {
                data[(k + 1) * m + j] = states[j * d + k];
            }
        }
        Tensor::from_vec(d + 1, m, data)
    }

    /// Network outputs at a single time over an `M×d` batch.
    pub fn forward_values(&self, t: f64, states: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = tape.constant(Self::input_matrix(t, states, d));
        let (n1, n2) = bound.forward(&mut tape, input)?;
        Ok((tape.value(n1).data().to_vec(), tape.value(n2).data().to_vec()))
    }

    /// ∇ₓ of the first output per sample, as an `M×d` row-major matrix.
    pub fn grad_x_n1(&self, t: f64, states: &[f64], d: usize) -> Result<Vec<f64>> {
        let m = states.len() / d;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = tape.leaf(Self::input_matrix(t, states, d), true);
        let (n1, _) = bound.forward(&mut tape, input)?;
        // Each sample's output depends only on its own column, so one
        // backward pass from the batch sum yields all per-sample gradients.
        let total = tape.sum_all(n1);
        let grads = tape.backward_graph(total, &[input])?;
        let adj = grads[&input];
        let spatial = tape.slice_rows(adj, 1, d + 1)?;
        let v = tape.value(spatial);
        let mut out = vec![0.0; m * d];
        for j in 0..m {
            for k in 0..d {
                out[j * d + k] = v.get(k, j);
            }
        }
        Ok(out)
    }

    /// Write parameters as a versioned textual checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("levytd-ckpt-v1\n");
        writeln!(
            out,
            "config {} {} {}",
            self.config.input_dim, self.config.width, self.config.blocks
        )
        .expect("string write");
        for p in &self.params {
            let [r, c] = p.tensor.shape();
            write!(out, "{} {r} {c}", p.name).expect("string write");
            for v in p.tensor.data() {
                write!(out, " {v:.16e}").expect("string write");
            }
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Net> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some("levytd-ckpt-v1") => {}
            other => {
                return Err(NetworkError::Format(format!(
                    "expected header levytd-ckpt-v1, got {other:?}"
                )))
            }
        }
        let config_line = lines
            .next()
            .ok_or_else(|| NetworkError::Format("missing config line".into()))?;
        let mut it = config_line.split_whitespace();
        if it.next() != Some("config") {
            return Err(NetworkError::Format("missing config line".into()));
        }
        let mut next_usize = |what: &str| -> Result<usize> {
            it.next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| NetworkError::Format(format!("bad config field {what}")))
        };
        let config = NetConfig {
            input_dim: next_usize("input_dim")?,
            width: next_usize("width")?,
            blocks: next_usize("blocks")?,
        };
        let mut params = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let name = it
                .next()
                .ok_or_else(|| NetworkError::Format("missing tensor name".into()))?
                .to_string();
            let rows: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| NetworkError::Format(format!("{name}: bad rows")))?;
            let cols: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| NetworkError::Format(format!("{name}: bad cols")))?;
            let data: Vec<f64> = it
                .map(|s| {
                    s.parse()
                        .map_err(|_| NetworkError::Format(format!("{name}: bad value '{s}'")))
                })
                .collect::<Result<_>>()?;
            if data.len() != rows * cols {
                return Err(NetworkError::Format(format!(
                    "{name}: {} values for {rows}x{cols}",
                    data.len()
                )));
            }
            params.push(Param {
                name,
                tensor: Tensor::from_vec(rows, cols, data),
            });
        }
        let net = Net { config, params };
        let expected = 2 + 4 * config.blocks + 2;
        if net.params.len() != expected {
            return Err(NetworkError::Format(format!(
                "expected {expected} tensors, got {}",
                net.params.len()
            )));
        }
        Ok(net)
    }
}

/// Parameter node ids of a network bound to one tape.
pub struct BoundNet {
    config: NetConfig,
    ids: Vec<NodeId>,
}

impl BoundNet {
    pub fn param_ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Forward pass over a `(d+1)×M` input node. Returns the `1×M` rows
    /// (𝒩₁, 𝒩₂).
    pub fn forward(&self, tape: &mut Tape, input: NodeId) -> Result<(NodeId, NodeId)> {
        let [rows, _] = tape.shape(input);
        if rows != self.config.input_dim {
            return Err(NetworkError::Autodiff(AutodiffError::DimensionMismatch {
                op: "network forward",
                lhs: [self.config.input_dim, 0],
                rhs: tape.shape(input),
            }));
        }
        let mut a = tape.affine(self.ids[0], input, self.ids[1])?;
        for b in 0..self.config.blocks {
            let base = 2 + 4 * b;
            let inner = tape.affine(self.ids[base], a, self.ids[base + 1])?;
            let inner = tape.tanh(inner);
            let outer = tape.affine(self.ids[base + 2], inner, self.ids[base + 3])?;
            let outer = tape.tanh(outer);
            a = tape.add(outer, a)?;
        }
        let head_base = 2 + 4 * self.config.blocks;
        let head = tape.affine(self.ids[head_base], a, self.ids[head_base + 1])?;
        let n1 = tape.slice_rows(head, 0, 1)?;
        let n2 = tape.slice_rows(head, 1, 2)?;
        Ok((n1, n2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{purpose, stream_rng};

    fn test_rng(seed: u64) -> ChaCha8Rng {
        stream_rng(seed, purpose::NET_INIT, 0, 0)
    }

    #[test]
    fn one_dimensional_config_has_paper_shapes() {
        let net = Net::init(NetConfig::for_dimension(1), &mut test_rng(1)).unwrap();
        assert_eq!(net.param_by_name("lift.w").unwrap().shape(), [25, 2]);
        assert_eq!(net.param_by_name("block0.w1").unwrap().shape(), [25, 25]);
        assert_eq!(net.param_by_name("block4.w2").unwrap().shape(), [25, 25]);
        assert_eq!(net.param_by_name("head.w").unwrap().shape(), [2, 25]);
        assert_eq!(net.param_count(), 2 + 4 * 5 + 2);
    }

    #[test]
    fn hundred_dimensional_config_widens_to_110() {
        let config = NetConfig::for_dimension(100);
        assert_eq!(config.width, 110);
        assert_eq!(config.input_dim, 101);
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = Net::init(NetConfig::for_dimension(1), &mut test_rng(7)).unwrap();
        let b = Net::init(NetConfig::for_dimension(1), &mut test_rng(7)).unwrap();
        for i in 0..a.param_count() {
            assert_eq!(a.param(i).data(), b.param(i).data());
        }
    }

    #[test]
    fn weights_respect_fan_in_bound_and_biases_are_zero() {
        let net = Net::init(NetConfig::for_dimension(1), &mut test_rng(3)).unwrap();
        let bound = 1.0 / 25f64.sqrt();
        for v in net.param_by_name("block2.w1").unwrap().data() {
            assert!(v.abs() <= bound);
        }
        assert!(net
            .param_by_name("lift.b")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn batch_row_equals_single_evaluation() {
        let net = Net::init(NetConfig::for_dimension(2), &mut test_rng(11)).unwrap();
        let states = [0.3, -0.8, 1.2, 0.4, -0.6, 0.9];
        let (n1_batch, n2_batch) = net.forward_values(0.5, &states, 2).unwrap();
        for j in 0..3 {
            let single = &states[j * 2..(j + 1) * 2];
            let (n1, n2) = net.forward_values(0.5, single, 2).unwrap();
            assert_eq!(n1[0], n1_batch[j]);
            assert_eq!(n2[0], n2_batch[j]);
        }
    }

    #[test]
    fn zero_parameters_give_zero_outputs_and_gradients() {
        let mut net = Net::init(NetConfig::for_dimension(1), &mut test_rng(5)).unwrap();
        for i in 0..net.param_count() {
            net.param_mut(i).data_mut().fill(0.0);
        }
        let (n1, n2) = net.forward_values(0.7, &[1.5, -2.0], 1).unwrap();
        assert_eq!(n1, vec![0.0, 0.0]);
        assert_eq!(n2, vec![0.0, 0.0]);
        let g = net.grad_x_n1(0.7, &[1.5, -2.0], 1).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn zeroed_blocks_reduce_to_the_affine_head_lift_composition() {
        let mut net = Net::init(NetConfig::for_dimension(1), &mut test_rng(13)).unwrap();
        for b in 0..5 {
            for suffix in ["w1", "b1", "w2", "b2"] {
                net.param_by_name_mut(&format!("block{b}.{suffix}"))
                    .unwrap()
                    .data_mut()
                    .fill(0.0);
            }
        }
        let (t, x) = (0.35, 1.7);
        let (n1, n2) = net.forward_values(t, &[x], 1).unwrap();

        // Zeroed blocks contribute exactly nothing, so the forward pass is
        // bit-identical to composing the head with the lift directly.
        let mut tape = Tape::new();
        let lift_w = tape.constant(net.param_by_name("lift.w").unwrap().clone());
        let lift_b = tape.constant(net.param_by_name("lift.b").unwrap().clone());
        let head_w = tape.constant(net.param_by_name("head.w").unwrap().clone());
        let head_b = tape.constant(net.param_by_name("head.b").unwrap().clone());
        let input = tape.constant(Net::input_matrix(t, &[x], 1));
        let hidden = tape.affine(lift_w, input, lift_b).unwrap();
        let head = tape.affine(head_w, hidden, head_b).unwrap();
        assert_eq!(n1[0], tape.value(head).get(0, 0));
        assert_eq!(n2[0], tape.value(head).get(1, 0));

        // And it agrees with an independent scalar evaluation to rounding.
        let lw = net.param_by_name("lift.w").unwrap();
        let hw = net.param_by_name("head.w").unwrap();
        let mut expect = [0.0; 2];
        for (out_row, e) in expect.iter_mut().enumerate() {
            for i in 0..25 {
                *e += hw.get(out_row, i) * (lw.get(i, 0) * t + lw.get(i, 1) * x);
            }
        }
        assert!((n1[0] - expect[0]).abs() < 1e-13);
        assert!((n2[0] - expect[1]).abs() < 1e-13);
    }

    #[test]
    fn head_only_linear_net_has_analytic_input_gradient() {
        // Blocks zeroed, head row 0 = w·(lift output). With lift = identity
        // embedding rows this realizes 𝒩₁ = w_t·t + w_x·x + c exactly.
        let mut net = Net::init(NetConfig::for_dimension(1), &mut test_rng(17)).unwrap();
        for b in 0..5 {
            for suffix in ["w1", "b1", "w2", "b2"] {
                net.param_by_name_mut(&format!("block{b}.{suffix}"))
                    .unwrap()
                    .data_mut()
                    .fill(0.0);
            }
        }
        {
            let lift = net.param_by_name_mut("lift.w").unwrap();
            lift.data_mut().fill(0.0);
            lift.set(0, 0, 1.0); // hidden[0] = t
            lift.set(1, 1, 1.0); // hidden[1] = x
        }
        {
            let head = net.param_by_name_mut("head.w").unwrap();
            head.data_mut().fill(0.0);
            head.set(0, 0, -0.7); // n1 = -0.7 t + 1.3 x
            head.set(0, 1, 1.3);
        }
        net.param_by_name_mut("head.b").unwrap().set(0, 0, 0.25);

        let xs = [0.4, -1.1, 2.3];
        let (n1, _) = net.forward_values(0.6, &xs, 1).unwrap();
        for (j, &x) in xs.iter().enumerate() {
            assert!((n1[j] - (-0.7 * 0.6 + 1.3 * x + 0.25)).abs() < 1e-15);
        }
        let g = net.grad_x_n1(0.6, &xs, 1).unwrap();
        for &gv in &g {
            assert!((gv - 1.3).abs() < 1e-15);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Net::init(NetConfig::for_dimension(3), &mut test_rng(23)).unwrap();
        let mut rng = test_rng(29);
        let t = 0.45;
        for _ in 0..10 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let grad = net.grad_x_n1(t, &x, 3).unwrap();
            let h = 1e-5;
            for k in 0..3 {
                let mut xp = x.clone();
                xp[k] += h;
                let (up, _) = net.forward_values(t, &xp, 3).unwrap();
                xp[k] = x[k] - h;
                let (um, _) = net.forward_values(t, &xp, 3).unwrap();
                let numeric = (up[0] - um[0]) / (2.0 * h);
                let denom = grad[k].abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (grad[k] - numeric).abs() / denom < 1e-5,
                    "coord {k}: {} vs {numeric}",
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn finite_inputs_never_produce_non_finite_outputs() {
        let net = Net::init(NetConfig::for_dimension(2), &mut test_rng(31)).unwrap();
        let mut rng = test_rng(37);
        for _ in 0..200 {
            let scale = 10f64.powi(rng.random_range(0..7));
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-scale..scale)).collect();
            let (n1, n2) = net.forward_values(0.9, &x, 2).unwrap();
            assert!(n1[0].is_finite() && n2[0].is_finite(), "x = {x:?}");
        }
    }

    #[test]
    fn output_always_has_two_channels() {
        for d in [1usize, 2, 7] {
            let net = Net::init(NetConfig::for_dimension(d), &mut test_rng(41)).unwrap();
            let x = vec![0.1; d * 4];
            let (n1, n2) = net.forward_values(0.2, &x, d).unwrap();
            assert_eq!(n1.len(), 4);
            assert_eq!(n2.len(), 4);
        }
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let dir = std::env::temp_dir().join(format!("levytd-ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");

        let net = Net::init(NetConfig::for_dimension(2), &mut test_rng(43)).unwrap();
        net.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("levytd-ckpt-v1\n"));

        let loaded = Net::load(&path).unwrap();
        assert_eq!(loaded.config, net.config);
        for i in 0..net.param_count() {
            assert_eq!(net.param(i).data(), loaded.param(i).data());
            assert_eq!(net.param_name(i), loaded.param_name(i));
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
