//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Values are 2-D row-major `f64` tensors. Operations are recorded on a
//! [`Tape`]; [`Tape::backward`] propagates adjoints in reverse order.
//!
//! Adjoints are built out of the same primitive operations and appended to
//! the tape, so a gradient obtained from one backward pass (for example the
//! spatial gradient of a network output) is itself a differentiable tape
//! expression. A later backward pass through it yields the mixed
//! parameter/input second derivatives the temporal-difference losses need.
//!
//! Training allocates one tape per optimizer step. Tapes draw their tensor
//! storage from a [`BufferPool`] and give it back through [`Tape::recycle`];
//! without this, every step pays mmap/page-fault costs for the same matrix
//! shapes it allocated the step before.

use std::collections::HashMap;
use std::sync::Arc;
use thiserror::Error;

/// Errors raised while building or differentiating a tape.
#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: [usize; 2] },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major matrix of `f64`. Scalars are `1×1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_vec(1, 1, vec![value])
    }

    /// Column vector from a slice.
    pub fn col(values: &[f64]) -> Self {
        Tensor::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!([self.rows, self.cols], [1, 1], "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Recycled tensor storage, keyed by exact buffer length.
#[derive(Default)]
pub struct BufferPool {
    by_len: HashMap<usize, Vec<Vec<f64>>>,
}

impl BufferPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// A buffer of exactly `len` elements with unspecified contents.
    fn take(&mut self, len: usize) -> Vec<f64> {
        match self.by_len.get_mut(&len).and_then(Vec::pop) {
            Some(buf) => buf,
            None => vec![0.0; len],
        }
    }

    fn take_zeroed(&mut self, len: usize) -> Vec<f64> {
        let mut buf = self.take(len);
        buf.fill(0.0);
        buf
    }

    fn put(&mut self, buf: Vec<f64>) {
        self.by_len.entry(buf.len()).or_default().push(buf);
    }
}

// ---------------------------------------------------------------------------
// Matrix kernels. All loops have a fixed summation order, so results are
// bit-reproducible.
// ---------------------------------------------------------------------------

/// C += A·B with A `r×k`, B `k×c`. Four B rows per pass to keep the C row
/// traffic down.
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * c..(i + 1) * c];
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * c..(kk + 1) * c];
            let b1 = &b[(kk + 1) * c..(kk + 2) * c];
            let b2 = &b[(kk + 2) * c..(kk + 3) * c];
            let b3 = &b[(kk + 3) * c..(kk + 4) * c];
            for j in 0..c {
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            kk += 4;
        }
        while kk < k {
            let aik = arow[kk];
            let brow = &b[kk * c..(kk + 1) * c];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
            kk += 1;
        }
    }
}

/// Lane-blocked dot product; fixed association order.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = x.len() / 8;
    for i in 0..chunks {
        let xs = &x[i * 8..i * 8 + 8];
        let ys = &y[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    acc.iter().sum::<f64>() + tail
}

/// C = A·Bᵀ with A `r×k`, B `c×k`: row-by-row dot products.
fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * c..(i + 1) * c];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C += Aᵀ·B with A `k×r`, B `k×c`: rank-1 accumulation per A row.
fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for kk in 0..k {
        let arow = &a[kk * r..(kk + 1) * r];
        let brow = &b[kk * c..(kk + 1) * c];
        for (i, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let crow = &mut out[i * c..(i + 1) * c];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// tanh over a slice.
//
// `f64::tanh` is a scalar libm call and dominated the forward-pass profile.
// This version is branch-free so the loop vectorizes: with y = |x|,
//   tanh(y) = -expm1(-2y) / (2 + expm1(-2y)),
// and expm1 is evaluated by Cody-Waite range reduction r = n·ln2 + s with a
// degree-13 Taylor core on |s| ≤ ln2/2. The expm1 form keeps full relative
// accuracy near 0 where the naive exp formula cancels.
// ---------------------------------------------------------------------------

const EXPM1_COEFFS: [f64; 13] = [
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
    1.0 / 3628800.0,
    1.0 / 39916800.0,
    1.0 / 479001600.0,
    1.0 / 6227020800.0,
];

#[inline(always)]
fn tanh_one(x: f64) -> f64 {
    const INV_LN2: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.9314718036912382e-1;
    const LN2_LO: f64 = 1.9082149292705877e-10;

    let y = x.abs();
    // Below -746 the exponential underflows and tanh rounds to 1; the clamp
    // also absorbs infinities.
    let r = (-2.0 * y).max(-746.0);
    let n = (r * INV_LN2).round_ties_even();
    let s = (r - n * LN2_HI) - n * LN2_LO;

    // expm1(s) = s·q(s), q(0) = 1.
    let mut q = EXPM1_COEFFS[12];
    for c in EXPM1_COEFFS[..12].iter().rev() {
        q = q * s + c;
    }
    let em1_s = s * q;

    // 2^n via exponent bits; n ≤ 0 here, and anything below -1022 collapses
    // to zero, which lands on the correct tanh limit of 1.
    let ni = unsafe { n.to_int_unchecked::<i64>() };
    let pow2 = f64::from_bits(((ni + 1023).max(0) as u64) << 52);
    let e = pow2 * em1_s + (pow2 - 1.0);

    let t = (-e / (2.0 + e)).copysign(x);
    if x.is_nan() {
        x
    } else {
        t
    }
}

fn tanh_slice(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = tanh_one(v);
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// A·Bᵀ
    MatMulNT(NodeId, NodeId),
    /// Aᵀ·B
    MatMulTN(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    /// `(r×c) + (r×1)` broadcast across columns.
    AddBias(NodeId, NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    /// `alpha·x + beta` elementwise; only `alpha` matters to the adjoint.
    AffineElem(NodeId, f64),
    SumSquares(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    BroadcastAll(NodeId),
    BroadcastRows(NodeId),
    BroadcastCols(NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    /// Embed at a row offset into a taller zero matrix.
    PadRows(NodeId, usize),
    PadCols(NodeId, usize),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    GatherCols(NodeId, Arc<Vec<usize>>),
    ScatterAddCols(NodeId, Arc<Vec<usize>>),
    /// Tensor scaled by a `1×1` node.
    ScalarMul(NodeId, NodeId),
    Abs(NodeId),
}

impl Op {
    fn operands(&self) -> (Option<NodeId>, Option<NodeId>) {
        use Op::*;
        match *self {
            Leaf => (None, None),
            MatMul(a, b) | MatMulNT(a, b) | MatMulTN(a, b) | Add(a, b) | Sub(a, b)
            | Hadamard(a, b) | AddBias(a, b) | ConcatRows(a, b) | ConcatCols(a, b)
            | ScalarMul(a, b) => (Some(a), Some(b)),
            Transpose(a)
            | Tanh(a)
            | Scale(a, _)
            | AffineElem(a, _)
            | SumSquares(a)
            | SumAll(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastAll(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | SliceRows(a, _)
            | SliceCols(a, _)
            | PadRows(a, _)
            | PadCols(a, _)
            | GatherCols(a, _)
            | ScatterAddCols(a, _)
            | Abs(a) => (Some(a), None),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Nodes are append-only and operands always precede
/// consumers, so reverse index order is a valid reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pool: BufferPool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape whose tensors draw from recycled storage.
    pub fn with_pool(pool: BufferPool) -> Self {
        Tape {
            nodes: Vec::new(),
            pool,
        }
    }

    /// Drop all nodes and hand the storage back for the next tape.
    pub fn recycle(self) -> BufferPool {
        let mut pool = self.pool;
        for node in self.nodes {
            pool.put(node.value.data);
        }
        pool
    }

    /// Pooled scratch buffer of exactly `len` elements, contents unspecified.
    /// Useful for assembling leaf tensors without fresh allocations.
    pub fn take_buffer(&mut self, len: usize) -> Vec<f64> {
        self.pool.take(len)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn alloc(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: self.pool.take(rows * cols),
        }
    }

    fn alloc_zeroed(&mut self, rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: self.pool.take_zeroed(rows * cols),
        }
    }

    /// Register an input tensor. Gradients are reported only for leaves
    /// created with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ([r, k], [kb, c]) = (self.shape(a), self.shape(b));
        if k != kb {
            return Err(AutodiffError::DimensionMismatch {
                op: "matmul",
                lhs: [r, k],
                rhs: [kb, c],
            });
        }
        let mut value = self.alloc_zeroed(r, c);
        mm_nn(
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            &mut value.data,
            r,
            k,
            c,
        );
        Ok(self.push(value, Op::MatMul(a, b), false))
    }

    /// `A·Bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ([r, k], [c, kb]) = (self.shape(a), self.shape(b));
        if k != kb {
            return Err(AutodiffError::DimensionMismatch {
                op: "matmul_nt",
                lhs: [r, k],
                rhs: [c, kb],
            });
        }
        let mut value = self.alloc(r, c);
        mm_nt(
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            &mut value.data,
            r,
            k,
            c,
        );
        Ok(self.push(value, Op::MatMulNT(a, b), false))
    }

    /// `Aᵀ·B` without materializing the transpose.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ([ka, r], [k, c]) = (self.shape(a), self.shape(b));
        if ka != k {
            return Err(AutodiffError::DimensionMismatch {
                op: "matmul_tn",
                lhs: [ka, r],
                rhs: [k, c],
            });
        }
        let mut value = self.alloc_zeroed(r, c);
        mm_tn(
            &self.nodes[a.0].value.data,
            &self.nodes[b.0].value.data,
            &mut value.data,
            r,
            k,
            c,
        );
        Ok(self.push(value, Op::MatMulTN(a, b), false))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.shape(a);
        let mut value = self.alloc(c, r);
        for i in 0..r {
            for j in 0..c {
                value.data[j * r + i] = self.nodes[a.0].value.data[i * c + j];
            }
        }
        self.push(value, Op::Transpose(a), false)
    }

    fn require_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::DimensionMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    fn ew_binary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.require_same_shape(op_name, a, b)?;
        let [r, c] = self.shape(a);
        let mut value = self.alloc(r, c);
        {
            let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
            for ((o, &x), &y) in value.data.iter_mut().zip(va).zip(vb) {
                *o = f(x, y);
            }
        }
        Ok(self.push(value, op, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.ew_binary("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    /// Add a `r×1` bias to every column of a `r×c` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb != [sa[0], 1] {
            return Err(AutodiffError::DimensionMismatch {
                op: "add_bias",
                lhs: sa,
                rhs: sb,
            });
        }
        let [r, c] = sa;
        let mut value = self.alloc(r, c);
        {
            let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[bias.0].value.data);
            for i in 0..r {
                let bv = vb[i];
                for (o, &x) in value.data[i * c..(i + 1) * c].iter_mut().zip(&va[i * c..]) {
                    *o = x + bv;
                }
            }
        }
        Ok(self.push(value, Op::AddBias(a, bias), false))
    }

    /// `W·x + b` with the bias broadcast across columns of `x`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matmul(w, x)?;
        self.add_bias(wx, b)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.shape(a);
        let mut value = self.alloc(r, c);
        tanh_slice(&self.nodes[a.0].value.data, &mut value.data);
        self.push(value, Op::Tanh(a), false)
    }

    fn ew_unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let [r, c] = self.shape(a);
        let mut value = self.alloc(r, c);
        for (o, &x) in value.data.iter_mut().zip(&self.nodes[a.0].value.data) {
            *o = f(x);
        }
        self.push(value, op, false)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.ew_unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// `alpha·a + beta` elementwise.
    pub fn affine_elem(&mut self, a: NodeId, alpha: f64, beta: f64) -> NodeId {
        self.ew_unary(a, |x| alpha * x + beta, Op::AffineElem(a, alpha))
    }

    /// Elementwise absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.ew_unary(a, f64::abs, Op::Abs(a))
    }

    /// Sum of squared entries, as a `1×1` node.
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s = dot(
            &self.nodes[a.0].value.data,
            &self.nodes[a.0].value.data,
        );
        self.push(Tensor::scalar(s), Op::SumSquares(a), false)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), false)
    }

    /// Column-wise sums: `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.shape(a);
        let mut value = self.alloc_zeroed(1, c);
        {
            let va = &self.nodes[a.0].value.data;
            for i in 0..r {
                for (o, &v) in value.data.iter_mut().zip(&va[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
        }
        self.push(value, Op::SumRows(a), false)
    }

    /// Row-wise sums: `r×c → r×1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let [r, c] = self.shape(a);
        let mut value = self.alloc(r, 1);
        {
            let va = &self.nodes[a.0].value.data;
            for i in 0..r {
                value.data[i] = va[i * c..(i + 1) * c].iter().sum();
            }
        }
        self.push(value, Op::SumCols(a), false)
    }

    pub fn broadcast_all(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if self.shape(a) != [1, 1] {
            return Err(AutodiffError::InvalidArgument {
                op: "broadcast_all",
                msg: format!("expected 1x1 input, got {:?}", self.shape(a)),
            });
        }
        let mut value = self.alloc(rows, cols);
        value.data.fill(self.nodes[a.0].value.data[0]);
        Ok(self.push(value, Op::BroadcastAll(a), false))
    }

    /// `1×c → r×c` by repeating the row.
    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let [ra, c] = self.shape(a);
        if ra != 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "broadcast_rows",
                msg: format!("expected 1xc input, got {:?}", [ra, c]),
            });
        }
        let mut value = self.alloc(rows, c);
        for i in 0..rows {
            let (src, dst) = (&self.nodes[a.0].value.data, &mut value.data[i * c..(i + 1) * c]);
            dst.copy_from_slice(src);
        }
        Ok(self.push(value, Op::BroadcastRows(a), false))
    }

    /// `r×1 → r×c` by repeating the column.
    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let [r, ca] = self.shape(a);
        if ca != 1 {
            return Err(AutodiffError::InvalidArgument {
                op: "broadcast_cols",
                msg: format!("expected rx1 input, got {:?}", [r, ca]),
            });
        }
        let mut value = self.alloc(r, cols);
        for i in 0..r {
            value.data[i * cols..(i + 1) * cols].fill(self.nodes[a.0].value.data[i]);
        }
        Ok(self.push(value, Op::BroadcastCols(a), false))
    }

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if r0 > r1 || r1 > r {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_rows",
                msg: format!("range {r0}..{r1} out of {r} rows"),
            });
        }
        let mut value = self.alloc(r1 - r0, c);
        value
            .data
            .copy_from_slice(&self.nodes[a.0].value.data[r0 * c..r1 * c]);
        Ok(self.push(value, Op::SliceRows(a, r0), false))
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if c0 > c1 || c1 > c {
            return Err(AutodiffError::InvalidArgument {
                op: "slice_cols",
                msg: format!("range {c0}..{c1} out of {c} cols"),
            });
        }
        let w = c1 - c0;
        let mut value = self.alloc(r, w);
        for i in 0..r {
            let src = &self.nodes[a.0].value.data[i * c + c0..i * c + c1];
            value.data[i * w..(i + 1) * w].copy_from_slice(src);
        }
        Ok(self.push(value, Op::SliceCols(a, c0), false))
    }

    fn pad_rows(&mut self, a: NodeId, r0: usize, rows: usize) -> NodeId {
        let [ra, c] = self.shape(a);
        let mut value = self.alloc_zeroed(rows, c);
        value.data[r0 * c..(r0 + ra) * c].copy_from_slice(&self.nodes[a.0].value.data);
        self.push(value, Op::PadRows(a, r0), false)
    }

    fn pad_cols(&mut self, a: NodeId, c0: usize, cols: usize) -> NodeId {
        let [r, ca] = self.shape(a);
        let mut value = self.alloc_zeroed(r, cols);
        for i in 0..r {
            let src = &self.nodes[a.0].value.data[i * ca..(i + 1) * ca];
            value.data[i * cols + c0..i * cols + c0 + ca].copy_from_slice(src);
        }
        self.push(value, Op::PadCols(a, c0), false)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ([ra, ca], [rb, cb]) = (self.shape(a), self.shape(b));
        if ca != cb {
            return Err(AutodiffError::DimensionMismatch {
                op: "concat_rows",
                lhs: [ra, ca],
                rhs: [rb, cb],
            });
        }
        let mut value = self.alloc(ra + rb, ca);
        value.data[..ra * ca].copy_from_slice(&self.nodes[a.0].value.data);
        value.data[ra * ca..].copy_from_slice(&self.nodes[b.0].value.data);
        Ok(self.push(value, Op::ConcatRows(a, b), false))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ([ra, ca], [rb, cb]) = (self.shape(a), self.shape(b));
        if ra != rb {
            return Err(AutodiffError::DimensionMismatch {
                op: "concat_cols",
                lhs: [ra, ca],
                rhs: [rb, cb],
            });
        }
        let c = ca + cb;
        let mut value = self.alloc(ra, c);
        for i in 0..ra {
            value.data[i * c..i * c + ca]
                .copy_from_slice(&self.nodes[a.0].value.data[i * ca..(i + 1) * ca]);
            value.data[i * c + ca..(i + 1) * c]
                .copy_from_slice(&self.nodes[b.0].value.data[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(value, Op::ConcatCols(a, b), false))
    }

    /// Concatenate along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        match axis {
            0 => self.concat_rows(a, b),
            1 => self.concat_cols(a, b),
            _ => Err(AutodiffError::InvalidArgument {
                op: "concat",
                msg: format!("axis must be 0 or 1, got {axis}"),
            }),
        }
    }

    /// Select columns by index (duplicates allowed): `r×c → r×len(idx)`.
    pub fn gather_cols(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_cols",
                msg: format!("index {bad} out of {c} cols"),
            });
        }
        let w = idx.len();
        let mut value = self.alloc(r, w);
        for i in 0..r {
            let row = &self.nodes[a.0].value.data[i * c..(i + 1) * c];
            for (o, &j) in value.data[i * w..(i + 1) * w].iter_mut().zip(idx.iter()) {
                *o = row[j];
            }
        }
        Ok(self.push(value, Op::GatherCols(a, idx), false))
    }

    /// Scatter-add columns of `a` into a `r×out_cols` zero matrix;
    /// `idx[j]` is the destination of column `j`. Duplicates accumulate.
    pub fn scatter_add_cols(
        &mut self,
        a: NodeId,
        idx: Arc<Vec<usize>>,
        out_cols: usize,
    ) -> Result<NodeId> {
        let [r, c] = self.shape(a);
        if idx.len() != c {
            return Err(AutodiffError::InvalidArgument {
                op: "scatter_add_cols",
                msg: format!("{} indices for {c} cols", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= out_cols) {
            return Err(AutodiffError::InvalidArgument {
                op: "scatter_add_cols",
                msg: format!("index {bad} out of {out_cols} cols"),
            });
        }
        let mut value = self.alloc_zeroed(r, out_cols);
        for i in 0..r {
            let src = &self.nodes[a.0].value.data[i * c..(i + 1) * c];
            let dst = &mut value.data[i * out_cols..(i + 1) * out_cols];
            for (j, &d) in idx.iter().enumerate() {
                dst[d] += src[j];
            }
        }
        Ok(self.push(value, Op::ScatterAddCols(a, idx), false))
    }

    /// Scale a tensor by a `1×1` node.
    pub fn scalar_mul(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.shape(s) != [1, 1] {
            return Err(AutodiffError::InvalidArgument {
                op: "scalar_mul",
                msg: format!("scale must be 1x1, got {:?}", self.shape(s)),
            });
        }
        let sv = self.nodes[s.0].value.data[0];
        Ok(self.ew_unary(a, |x| x * sv, Op::ScalarMul(a, s)))
    }

    /// Convenience: mean of squared entries as a `1×1` node.
    pub fn mean_squares(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.data.len().max(1);
        let ss = self.sum_squares(a);
        self.scale(ss, 1.0 / n as f64)
    }

    /// Gradients of a scalar `root` with respect to every grad-requiring
    /// leaf, by reverse accumulation.
    pub fn backward(&mut self, root: NodeId) -> Result<HashMap<NodeId, Tensor>> {
        let wrt: Vec<NodeId> = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].requires_grad)
            .map(NodeId)
            .collect();
        let nodes = self.backward_graph(root, &wrt)?;
        Ok(nodes
            .into_iter()
            .map(|(leaf, adj)| (leaf, self.value(adj).clone()))
            .collect())
    }

    /// Reverse pass that records the adjoint computation on the tape and
    /// returns adjoint node ids for the requested `wrt` nodes. Nodes in
    /// `wrt` that the root does not depend on are absent from the map.
    pub fn backward_graph(
        &mut self,
        root: NodeId,
        wrt: &[NodeId],
    ) -> Result<HashMap<NodeId, NodeId>> {
        if self.shape(root) != [1, 1] {
            return Err(AutodiffError::NonScalarRoot {
                shape: self.shape(root),
            });
        }

        // needs[i]: some wrt node is reachable from i through operands.
        let mut needs = vec![false; self.nodes.len()];
        for w in wrt {
            needs[w.0] = true;
        }
        for i in 0..=root.0 {
            if needs[i] {
                continue;
            }
            let (a, b) = self.nodes[i].op.operands();
            needs[i] =
                a.map(|n| needs[n.0]).unwrap_or(false) || b.map(|n| needs[n.0]).unwrap_or(false);
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; root.0 + 1];
        adjoint[root.0] = Some(self.constant(Tensor::scalar(1.0)));

        for i in (0..=root.0).rev() {
            let g = match adjoint[i] {
                Some(g) if needs[i] => g,
                _ => continue,
            };
            let op = self.nodes[i].op.clone();
            self.push_adjoints(NodeId(i), &op, g, &needs, &mut adjoint)?;
        }

        let mut out = HashMap::new();
        for w in wrt {
            if let Some(adj) = adjoint[w.0] {
                out.insert(*w, adj);
            }
        }
        Ok(out)
    }

    fn accumulate(
        &mut self,
        adjoint: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        adjoint[target.0] = Some(match adjoint[target.0] {
            Some(prev) => self.add(prev, contribution)?,
            None => contribution,
        });
        Ok(())
    }

    fn push_adjoints(
        &mut self,
        out: NodeId,
        op: &Op,
        g: NodeId,
        needs: &[bool],
        adjoint: &mut [Option<NodeId>],
    ) -> Result<()> {
        use Op::*;
        match *op {
            Leaf => {}
            MatMul(a, b) => {
                if needs[a.0] {
                    let da = self.matmul_nt(g, b)?;
                    self.accumulate(adjoint, a, da)?;
                }
                if needs[b.0] {
                    let db = self.matmul_tn(a, g)?;
                    self.accumulate(adjoint, b, db)?;
                }
            }
            MatMulNT(a, b) => {
                if needs[a.0] {
                    let da = self.matmul(g, b)?;
                    self.accumulate(adjoint, a, da)?;
                }
                if needs[b.0] {
                    let db = self.matmul_tn(g, a)?;
                    self.accumulate(adjoint, b, db)?;
                }
            }
            MatMulTN(a, b) => {
                if needs[a.0] {
                    let da = self.matmul_nt(b, g)?;
                    self.accumulate(adjoint, a, da)?;
                }
                if needs[b.0] {
                    let db = self.matmul(a, g)?;
                    self.accumulate(adjoint, b, db)?;
                }
            }
            Transpose(a) => {
                if needs[a.0] {
                    let da = self.transpose(g);
                    self.accumulate(adjoint, a, da)?;
                }
            }
            Add(a, b) => {
                if needs[a.0] {
                    self.accumulate(adjoint, a, g)?;
                }
                if needs[b.0] {
                    self.accumulate(adjoint, b, g)?;
                }
            }
            Sub(a, b) => {
                if needs[a.0] {
                    self.accumulate(adjoint, a, g)?;
                }
                if needs[b.0] {
                    let db = self.scale(g, -1.0);
                    self.accumulate(adjoint, b, db)?;
                }
            }
            Hadamard(a, b) => {
                if needs[a.0] {
                    let da = self.hadamard(g, b)?;
                    self.accumulate(adjoint, a, da)?;
                }
                if needs[b.0] {
                    let db = self.hadamard(g, a)?;
                    self.accumulate(adjoint, b, db)?;
                }
            }
            AddBias(a, bias) => {
                if needs[a.0] {
                    self.accumulate(adjoint, a, g)?;
                }
                if needs[bias.0] {
                    let db = self.sum_cols(g);
                    self.accumulate(adjoint, bias, db)?;
                }
            }
            Tanh(a) => {
                if needs[a.0] {
                    // d tanh = 1 - tanh^2, written in primitives so it stays
                    // differentiable.
                    let y2 = self.hadamard(out, out)?;
                    let factor = self.affine_elem(y2, -1.0, 1.0);
                    let da = self.hadamard(g, factor)?;
                    self.accumulate(adjoint, a, da)?;
                }
            }
            Scale(a, c) => {
                if needs[a.0] {
                    let da = self.scale(g, c);
                    self.accumulate(adjoint, a, da)?;
                }
            }
            AffineElem(a, alpha) => {
                if needs[a.0] {
                    let da = self.scale(g, alpha);
                    self.accumulate(adjoint, a, da)?;
                }
            }
            SumSquares(a) => {
                if needs[a.0] {
                    let g2 = self.scale(g, 2.0);
                    let da = self.scalar_mul(a, g2)?;
                    self.accumulate(adjoint, a, da)?;
                }
            }
            SumAll(a) => {
                if needs[a.0] {
                    let [r, c] = self.shape(a);
                    let da = self.broadcast_all(g, r, c)?;
                    self.accumulate(adjoint, a, da)?;
                }
            }
            SumRows(a) => {
                if needs[a.0] {
                    let rows = self.shape(a)[0];
                    let da = self.broadcast_rows(g, rows)?;
                    self.accumulate(adjoint, a, da)?;
                }
            }
            SumCols(a) => {
                if needs[a.0] {
                    let cols = self.shape(a)[1];
                    let da = self.broadcast_cols(g, cols)?;
                    self.accumulate(adjoint, a, da)?;
                }
            }
            BroadcastAll(a) => {
                if needs[a.0] {
                    let da = self.sum_all(g);
                    self.accumulate(adjoint, a, da)?;
                }
            }
            BroadcastRows(a) => {
                if needs[a.0] {
                    let da = self.sum_rows(g);
                    self.accumulate(adjoint, a, da)?;
                }
            }
            BroadcastCols(a) => {
                if needs[a.0] {
                    let da = self.sum_cols(g);
                    self.accumulate(adjoint, a, da)?;
                }
            }
            SliceRows(a, r0) => {
                if needs[a.0] {
                    let rows = self.shape(a)[0];
                    let da = self.pad_rows(g, r0, rows);
                    self.accumulate(adjoint, a, da)?;
                }
            }
            SliceCols(a, c0) => {
                if needs[a.0] {
                    let cols = self.shape(a)[1];
                    let da = self.pad_cols(g, c0, cols);
                    self.accumulate(adjoint, a, da)?;
                }
            }
            PadRows(a, r0) => {
                if needs[a.0] {
                    let rows = self.shape(a)[0];
                    let da = self.slice_rows(g, r0, r0 + rows)?;
                    self.accumulate(adjoint, a, da)?;
                }
            }
            PadCols(a, c0) => {
                if needs[a.0] {
                    let cols = self.shape(a)[1];
                    let da = self.slice_cols(g, c0, c0 + cols)?;
                    self.accumulate(adjoint, a, da)?;
                }
            }
            ConcatRows(a, b) => {
                let ra = self.shape(a)[0];
                if needs[a.0] {
                    let da = self.slice_rows(g, 0, ra)?;
                    self.accumulate(adjoint, a, da)?;
                }
                if needs[b.0] {
                    let rows = self.shape(out)[0];
                    let db = self.slice_rows(g, ra, rows)?;
                    self.accumulate(adjoint, b, db)?;
                }
            }
            ConcatCols(a, b) => {
                let ca = self.shape(a)[1];
                if needs[a.0] {
                    let da = self.slice_cols(g, 0, ca)?;
                    self.accumulate(adjoint, a, da)?;
                }
                if needs[b.0] {
                    let cols = self.shape(out)[1];
                    let db = self.slice_cols(g, ca, cols)?;
                    self.accumulate(adjoint, b, db)?;
                }
            }
            GatherCols(a, ref idx) => {
                if needs[a.0] {
                    let cols = self.shape(a)[1];
                    let da = self.scatter_add_cols(g, idx.clone(), cols)?;
                    self.accumulate(adjoint, a, da)?;
                }
            }
            ScatterAddCols(a, ref idx) => {
                if needs[a.0] {
                    let da = self.gather_cols(g, idx.clone())?;
                    self.accumulate(adjoint, a, da)?;
                }
            }
            ScalarMul(a, s) => {
                if needs[a.0] {
                    let da = self.scalar_mul(g, s)?;
                    self.accumulate(adjoint, a, da)?;
                }
                if needs[s.0] {
                    let prod = self.hadamard(g, a)?;
                    let ds = self.sum_all(prod);
                    self.accumulate(adjoint, s, ds)?;
                }
            }
            Abs(a) => {
                if needs[a.0] {
                    let [r, c] = self.shape(a);
                    let mut sign = self.alloc(r, c);
                    for (o, &v) in sign.data.iter_mut().zip(&self.nodes[a.0].value.data) {
                        *o = if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    let sign = self.constant(sign);
                    let da = self.hadamard(g, sign)?;
                    self.accumulate(adjoint, a, da)?;
                }
            }
        }
        Ok(())
    }
}
