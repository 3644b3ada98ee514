//! Dense f32 tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Tape`] records every operation applied to variables created on it; the
//! node list is already in topological order, so [`Tape::backward`] is a
//! single reverse sweep. Tapes are confined to one thread and live for one
//! forward/backward pass; batch parallelism is independent tapes whose
//! gradients are summed by the caller.
//!
//! Forward values are checked for NaN/Inf after every operation. Data is
//! 32-bit; scalar reductions accumulate in 64-bit.

use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("backward target must be a scalar, got shape {got:?}")]
    LossNotScalar { got: Vec<usize> },
    #[error("variable is not recorded on this tape")]
    NotOnTape,
    #[error("{op}: index {index} out of bounds for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Row-major dense tensor of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Normal init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interpret as a matrix: rank 2 gives (rows, cols), rank 1 gives (1, n).
    pub fn as_matrix(&self) -> Option<(usize, usize)> {
        match self.shape.len() {
            1 => Some((1, self.shape[0])),
            2 => Some((self.shape[0], self.shape[1])),
            _ => None,
        }
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact byte-level equality, used by freeze-contract checks.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Index of the maximum value; ties resolve to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AddKind {
    Same,
    /// Right operand is rank-1 and broadcast over the rows of the left.
    BiasRows,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, AddKind),
    Mul(Var, Var),
    Scale(Var, f32),
    Matmul(Var, Var),
    MatmulBt(Var, Var),
    MeanAxis0(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Embedding(Var, Vec<usize>),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Softmax(Var),
    LogSoftmax(Var),
    AttnScores {
        q: Var,
        k: Var,
        causal: bool,
        inv_scale: f32,
    },
    Dropout(Var, Vec<f32>),
    Reshape(Var),
    PickPerRow(Var, Vec<usize>),
    SumAll(Var),
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Large negative used for causal masking; finite so the NaN/Inf guard passes,
/// but exp() of it underflows to exactly zero after max subtraction.
const MASKED: f32 = -1.0e9;

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    training: bool,
    rng: Rng,
}

impl Tape {
    /// Tape for a training step; the seed drives dropout masks.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: true,
            rng: Rng::for_stream(seed, "tape.dropout"),
        }
    }

    /// Tape for inference: dropout is the identity and draws no randomness.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: false,
            rng: Rng::new(0),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward() with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when the loss did not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f32> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[v.0].value.numel()],
        }
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn checked(&mut self, op: &'static str, value: Tensor, needs: bool, rec: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        Ok(self.push(value, needs, rec))
    }

    // -- variable creation ---------------------------------------------------

    /// Record a leaf. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // -- ops ------------------------------------------------------------------

    /// Elementwise add, or bias add when `b` is rank-1 matching `a`'s last dim.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let kind = if ta.shape() == tb.shape() {
            AddKind::Same
        } else if tb.shape().len() == 1 && ta.shape().last() == Some(&tb.shape()[0]) {
            AddKind::BiasRows
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let mut out = ta.clone();
        match kind {
            AddKind::Same => {
                for (o, x) in out.data.iter_mut().zip(&tb.data) {
                    *o += x;
                }
            }
            AddKind::BiasRows => {
                let n = tb.data.len();
                for (i, o) in out.data.iter_mut().enumerate() {
                    *o += tb.data[i % n];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.checked("add", out, needs, Op::Add(a, b, kind))
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = ta.clone();
        for (o, x) in out.data.iter_mut().zip(&tb.data) {
            *o *= x;
        }
        let needs = self.needs(a) || self.needs(b);
        self.checked("mul", out, needs, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let mut out = self.nodes[a.0].value.clone();
        for o in out.data.iter_mut() {
            *o *= factor;
        }
        let needs = self.needs(a);
        self.checked("scale", out, needs, Op::Scale(a, factor))
    }

    /// (m,k) x (k,n) -> (m,n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ((m, k), (k2, n)) = match (ta.as_matrix(), tb.as_matrix()) {
            (Some(x), Some(y)) => (x, y),
            _ => {
                return Err(TensorError::BadShape {
                    op: "matmul",
                    expected: "rank <= 2",
                    got: ta.shape().to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = Tensor::from_vec(vec![m, n], matmul_raw(&ta.data, &tb.data, m, k, n));
        let needs = self.needs(a) || self.needs(b);
        self.checked("matmul", out, needs, Op::Matmul(a, b))
    }

    /// (m,k) x (n,k) -> (m,n), i.e. a . b^T. Used for tied output projections.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let ((m, k), (n, k2)) = match (ta.as_matrix(), tb.as_matrix()) {
            (Some(x), Some(y)) => (x, y),
            _ => {
                return Err(TensorError::BadShape {
                    op: "matmul_bt",
                    expected: "rank <= 2",
                    got: ta.shape().to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_bt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let arow = &ta.data[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &tb.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        let out = Tensor::from_vec(vec![m, n], out);
        let needs = self.needs(a) || self.needs(b);
        self.checked("matmul_bt", out, needs, Op::MatmulBt(a, b))
    }

    /// Mean over axis 0: (m,n) -> (n).
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.as_matrix().ok_or(TensorError::BadShape {
            op: "mean_axis0",
            expected: "rank 2",
            got: ta.shape().to_vec(),
        })?;
        if m == 0 {
            return Err(TensorError::BadShape {
                op: "mean_axis0",
                expected: "at least one row",
                got: ta.shape().to_vec(),
            });
        }
        let inv = 1.0 / m as f32;
        let mut out = vec![0.0f32; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += ta.data[i * n + j];
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let out = Tensor::from_vec(vec![n], out);
        let needs = self.needs(a);
        self.checked("mean_axis0", out, needs, Op::MeanAxis0(a))
    }

    /// Stack matrices with equal column counts along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let n = self.nodes[parts[0].0].value.as_matrix().unwrap().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let (m, nn) = t.as_matrix().ok_or(TensorError::BadShape {
                op: "concat_rows",
                expected: "rank <= 2",
                got: t.shape().to_vec(),
            })?;
            if nn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, n],
                    rhs: t.shape().to_vec(),
                });
            }
            rows += m;
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::from_vec(vec![rows, n], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.checked("concat_rows", out, needs, Op::ConcatRows(parts.to_vec()))
    }

    /// Concatenate matrices with equal row counts along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let m = self.nodes[parts[0].0].value.as_matrix().unwrap().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| self.nodes[p.0].value.as_matrix().unwrap().1)
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0f32; m * n];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            let (mm, _) = t.as_matrix().unwrap();
            if mm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m, n],
                    rhs: t.shape().to_vec(),
                });
            }
            for i in 0..m {
                data[i * n + col..i * n + col + w].copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let out = Tensor::from_vec(vec![m, n], data);
        let needs = parts.iter().any(|&p| self.needs(p));
        self.checked("concat_cols", out, needs, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.as_matrix().ok_or(TensorError::BadShape {
            op: "slice_rows",
            expected: "rank 2",
            got: ta.shape().to_vec(),
        })?;
        if start + len > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                size: m,
            });
        }
        let out = Tensor::from_vec(vec![len, n], ta.data[start * n..(start + len) * n].to_vec());
        let needs = self.needs(a);
        self.checked("slice_rows", out, needs, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.as_matrix().ok_or(TensorError::BadShape {
            op: "slice_cols",
            expected: "rank 2",
            got: ta.shape().to_vec(),
        })?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: n,
            });
        }
        let mut data = Vec::with_capacity(len * m);
        for i in 0..m {
            data.extend_from_slice(&ta.data[i * n + start..i * n + start + len]);
        }
        let out = Tensor::from_vec(vec![m, len], data);
        let needs = self.needs(a);
        self.checked("slice_cols", out, needs, Op::SliceCols(a, start))
    }

    /// Row lookup: table (v,d) and ids -> (len(ids), d).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (v, d) = tt.as_matrix().ok_or(TensorError::BadShape {
            op: "embedding",
            expected: "rank 2",
            got: tt.shape().to_vec(),
        })?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::TokenOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(&tt.data[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(vec![ids.len(), d], data);
        let needs = self.needs(table);
        self.checked("embedding", out, needs, Op::Embedding(table, ids.to_vec()))
    }

    /// Tanh-approximated gelu.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let mut out = ta.clone();
        for o in out.data.iter_mut() {
            *o = gelu_fwd(*o);
        }
        let needs = self.needs(a);
        self.checked("gelu", out, needs, Op::Gelu(a))
    }

    /// Normalize the last axis to zero mean / unit variance, then scale+shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gain.0].value,
            &self.nodes[bias.0].value,
        );
        let (m, n) = tx.as_matrix().ok_or(TensorError::BadShape {
            op: "layer_norm",
            expected: "rank <= 2",
            got: tx.shape().to_vec(),
        })?;
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &tx.data[i * n..(i + 1) * n];
            let (mean, inv_std) = row_norm_stats(row);
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std * tg.data[j] + tb.data[j];
            }
        }
        let out = Tensor::from_vec(tx.shape().to_vec(), data);
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.checked("layer_norm", out, needs, Op::LayerNorm { x, gain, bias })
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.as_matrix().ok_or(TensorError::BadShape {
            op: "softmax",
            expected: "rank <= 2",
            got: ta.shape().to_vec(),
        })?;
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &ta.data[i * n..(i + 1) * n];
            softmax_row(row, &mut data[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_vec(ta.shape().to_vec(), data);
        let needs = self.needs(a);
        self.checked("softmax", out, needs, Op::Softmax(a))
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.as_matrix().ok_or(TensorError::BadShape {
            op: "log_softmax",
            expected: "rank <= 2",
            got: ta.shape().to_vec(),
        })?;
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &ta.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for &v in row {
                z += ((v - max) as f64).exp();
            }
            let log_z = z.ln() as f32;
            for j in 0..n {
                data[i * n + j] = row[j] - max - log_z;
            }
        }
        let out = Tensor::from_vec(ta.shape().to_vec(), data);
        let needs = self.needs(a);
        self.checked("log_softmax", out, needs, Op::LogSoftmax(a))
    }

    /// Scaled dot-product attention scores q.k^T / sqrt(d_k); with `causal`
    /// the strictly upper triangle is masked to a large negative.
    pub fn attn_scores(&mut self, q: Var, k: Var, causal: bool) -> Result<Var> {
        let (tq, tk) = (&self.nodes[q.0].value, &self.nodes[k.0].value);
        let ((t, dk), (s, dk2)) = match (tq.as_matrix(), tk.as_matrix()) {
            (Some(x), Some(y)) => (x, y),
            _ => {
                return Err(TensorError::BadShape {
                    op: "attn_scores",
                    expected: "rank 2",
                    got: tq.shape().to_vec(),
                })
            }
        };
        if dk != dk2 || (causal && t != s) {
            return Err(TensorError::ShapeMismatch {
                op: "attn_scores",
                lhs: tq.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let inv_scale = 1.0 / (dk as f32).sqrt();
        let mut data = vec![0.0f32; t * s];
        for i in 0..t {
            let qrow = &tq.data[i * dk..(i + 1) * dk];
            for j in 0..s {
                data[i * s + j] = if causal && j > i {
                    MASKED
                } else {
                    dot(qrow, &tk.data[j * dk..(j + 1) * dk]) * inv_scale
                };
            }
        }
        let out = Tensor::from_vec(vec![t, s], data);
        let needs = self.needs(q) || self.needs(k);
        self.checked(
            "attn_scores",
            out,
            needs,
            Op::AttnScores {
                q,
                k,
                causal,
                inv_scale,
            },
        )
    }

    /// Inverted dropout. Identity (and RNG-free) on inference tapes.
    pub fn dropout(&mut self, a: Var, p: f32) -> Result<Var> {
        assert!((0.0..1.0).contains(&p), "dropout probability {p}");
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let inv = 1.0 / keep;
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<f32> = (0..n)
            .map(|_| if self.rng.next_f32() < keep { inv } else { 0.0 })
            .collect();
        let ta = &self.nodes[a.0].value;
        let mut out = ta.clone();
        for (o, &m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        let needs = self.needs(a);
        self.checked("dropout", out, needs, Op::Dropout(a, mask))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != ta.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: "same element count",
                got: shape,
            });
        }
        let out = Tensor::from_vec(shape, ta.data.clone());
        let needs = self.needs(a);
        self.checked("reshape", out, needs, Op::Reshape(a))
    }

    /// Per row i, select column indices[i]: (m,n) -> (m).
    pub fn pick_per_row(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.as_matrix().ok_or(TensorError::BadShape {
            op: "pick_per_row",
            expected: "rank 2",
            got: ta.shape().to_vec(),
        })?;
        if indices.len() != m {
            return Err(TensorError::BadShape {
                op: "pick_per_row",
                expected: "one index per row",
                got: vec![indices.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (i, &j) in indices.iter().enumerate() {
            if j >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick_per_row",
                    index: j,
                    size: n,
                });
            }
            data.push(ta.data[i * n + j]);
        }
        let out = Tensor::from_vec(vec![m], data);
        let needs = self.needs(a);
        self.checked(
            "pick_per_row",
            out,
            needs,
            Op::PickPerRow(a, indices.to_vec()),
        )
    }

    /// f64 sum of a recorded value, read off-tape. Finite-difference oracles
    /// use this so the signal is not quantized away by the final f32 scalar.
    pub fn sum_f64(&self, a: Var) -> f64 {
        self.nodes[a.0].value.data.iter().map(|&v| v as f64).sum()
    }

    /// Sum of all elements, accumulated in f64, returned as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let mut acc = 0.0f64;
        for &v in &ta.data {
            acc += v as f64;
        }
        let out = Tensor::scalar(acc as f32);
        let needs = self.needs(a);
        self.checked("sum_all", out, needs, Op::SumAll(a))
    }

    // -- backward --------------------------------------------------------------

    /// Reverse sweep from a scalar loss; gradients are then available via
    /// [`Tape::grad`]. Leaves that do not participate report zeros through
    /// [`Tape::grad_or_zeros`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::NotOnTape);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::LossNotScalar {
                got: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Lazily allocated gradient buffer for node `v`.
fn grad_mut<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], v: Var) -> &'a mut Vec<f32> {
    let numel = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![0.0; numel])
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f32>>], idx: usize, g: &[f32]) {
    let needs = |v: Var| nodes[v.0].needs_grad;
    match &nodes[idx].op {
        Op::Leaf => {}
        &Op::Add(a, b, kind) => {
            if needs(a) {
                let ga = grad_mut(nodes, grads, a);
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += x;
                }
            }
            if needs(b) {
                match kind {
                    AddKind::Same => {
                        let gb = grad_mut(nodes, grads, b);
                        for (d, &x) in gb.iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                    AddKind::BiasRows => {
                        let n = nodes[b.0].value.numel();
                        let gb = grad_mut(nodes, grads, b);
                        for (i, &x) in g.iter().enumerate() {
                            gb[i % n] += x;
                        }
                    }
                }
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                let vb = &nodes[b.0].value.data;
                let ga = grad_mut(nodes, grads, a);
                for ((d, &x), &v) in ga.iter_mut().zip(g).zip(vb) {
                    *d += x * v;
                }
            }
            if needs(b) {
                let va = &nodes[a.0].value.data;
                let gb = grad_mut(nodes, grads, b);
                for ((d, &x), &v) in gb.iter_mut().zip(g).zip(va) {
                    *d += x * v;
                }
            }
        }
        &Op::Scale(a, factor) => {
            if needs(a) {
                let ga = grad_mut(nodes, grads, a);
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += factor * x;
                }
            }
        }
        &Op::Matmul(a, b) => {
            let (m, k) = nodes[a.0].value.as_matrix().unwrap();
            let (_, n) = nodes[b.0].value.as_matrix().unwrap();
            if needs(a) {
                // dA = G . B^T
                let vb = &nodes[b.0].value.data;
                let ga = grad_mut(nodes, grads, a);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        ga[i * k + kk] += dot(grow, &vb[kk * n..(kk + 1) * n]);
                    }
                }
            }
            if needs(b) {
                // dB = A^T . G
                let va = &nodes[a.0].value.data;
                let gb = grad_mut(nodes, grads, b);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av = va[i * k + kk];
                        let dst = &mut gb[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            dst[j] += av * grow[j];
                        }
                    }
                }
            }
        }
        &Op::MatmulBt(a, b) => {
            let (m, k) = nodes[a.0].value.as_matrix().unwrap();
            let (n, _) = nodes[b.0].value.as_matrix().unwrap();
            if needs(a) {
                // dA = G . B
                let vb = &nodes[b.0].value.data;
                let ga = grad_mut(nodes, grads, a);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let dst = &mut ga[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gv = grow[j];
                        let brow = &vb[j * k..(j + 1) * k];
                        for kk in 0..k {
                            dst[kk] += gv * brow[kk];
                        }
                    }
                }
            }
            if needs(b) {
                // dB = G^T . A
                let va = &nodes[a.0].value.data;
                let gb = grad_mut(nodes, grads, b);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &va[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gv = grow[j];
                        let dst = &mut gb[j * k..(j + 1) * k];
                        for kk in 0..k {
                            dst[kk] += gv * arow[kk];
                        }
                    }
                }
            }
        }
        &Op::MeanAxis0(a) => {
            if needs(a) {
                let (m, n) = nodes[a.0].value.as_matrix().unwrap();
                let inv = 1.0 / m as f32;
                let ga = grad_mut(nodes, grads, a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j] * inv;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].value.numel();
                if needs(p) {
                    let gp = grad_mut(nodes, grads, p);
                    for (d, &x) in gp.iter_mut().zip(&g[offset..offset + len]) {
                        *d += x;
                    }
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let m = nodes[parts[0].0].value.as_matrix().unwrap().0;
            let n: usize = parts
                .iter()
                .map(|&p| nodes[p.0].value.as_matrix().unwrap().1)
                .sum();
            let mut col = 0;
            for &p in parts {
                let w = nodes[p.0].value.as_matrix().unwrap().1;
                if needs(p) {
                    let gp = grad_mut(nodes, grads, p);
                    for i in 0..m {
                        for j in 0..w {
                            gp[i * w + j] += g[i * n + col + j];
                        }
                    }
                }
                col += w;
            }
        }
        &Op::SliceRows(a, start) => {
            if needs(a) {
                let n = nodes[a.0].value.as_matrix().unwrap().1;
                let ga = grad_mut(nodes, grads, a);
                for (off, &x) in g.iter().enumerate() {
                    ga[start * n + off] += x;
                }
            }
        }
        &Op::SliceCols(a, start) => {
            if needs(a) {
                let (m, n) = nodes[a.0].value.as_matrix().unwrap();
                let w = g.len() / m;
                let ga = grad_mut(nodes, grads, a);
                for i in 0..m {
                    for j in 0..w {
                        ga[i * n + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::Embedding(table, ids) => {
            if needs(*table) {
                let d = nodes[table.0].value.as_matrix().unwrap().1;
                let gt = grad_mut(nodes, grads, *table);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[row * d + j];
                    }
                }
            }
        }
        &Op::Gelu(a) => {
            if needs(a) {
                let va = &nodes[a.0].value.data;
                let ga = grad_mut(nodes, grads, a);
                for ((d, &x), &v) in ga.iter_mut().zip(g).zip(va) {
                    *d += x * gelu_bwd(v);
                }
            }
        }
        &Op::LayerNorm { x, gain, bias } => {
            let (m, n) = nodes[x.0].value.as_matrix().unwrap();
            let vx = &nodes[x.0].value.data;
            let vg = &nodes[gain.0].value.data;
            for i in 0..m {
                let row = &vx[i * n..(i + 1) * n];
                let grow = &g[i * n..(i + 1) * n];
                let (mean, inv_std) = row_norm_stats(row);
                let xhat: Vec<f32> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                if needs(gain) {
                    let gg = grad_mut(nodes, grads, gain);
                    for j in 0..n {
                        gg[j] += grow[j] * xhat[j];
                    }
                }
                if needs(bias) {
                    let gb = grad_mut(nodes, grads, bias);
                    for j in 0..n {
                        gb[j] += grow[j];
                    }
                }
                if needs(x) {
                    let gy: Vec<f32> = (0..n).map(|j| grow[j] * vg[j]).collect();
                    let mean_gy = gy.iter().sum::<f32>() / n as f32;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / n as f32;
                    let gx = grad_mut(nodes, grads, x);
                    for j in 0..n {
                        gx[i * n + j] += (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) * inv_std;
                    }
                }
            }
        }
        &Op::Softmax(a) => {
            if needs(a) {
                let (m, n) = nodes[idx].value.as_matrix().unwrap();
                let y = &nodes[idx].value.data;
                let ga = grad_mut(nodes, grads, a);
                for i in 0..m {
                    let yi = &y[i * n..(i + 1) * n];
                    let gi = &g[i * n..(i + 1) * n];
                    let s = dot(gi, yi);
                    for j in 0..n {
                        ga[i * n + j] += yi[j] * (gi[j] - s);
                    }
                }
            }
        }
        &Op::LogSoftmax(a) => {
            if needs(a) {
                let (m, n) = nodes[idx].value.as_matrix().unwrap();
                let y = &nodes[idx].value.data;
                let ga = grad_mut(nodes, grads, a);
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    let gsum: f32 = gi.iter().sum();
                    for j in 0..n {
                        let p = y[i * n + j].exp();
                        ga[i * n + j] += gi[j] - p * gsum;
                    }
                }
            }
        }
        &Op::AttnScores {
            q,
            k,
            causal,
            inv_scale,
        } => {
            let (t, dk) = nodes[q.0].value.as_matrix().unwrap();
            let (s, _) = nodes[k.0].value.as_matrix().unwrap();
            if needs(q) {
                let vk = &nodes[k.0].value.data;
                let gq = grad_mut(nodes, grads, q);
                for i in 0..t {
                    for j in 0..s {
                        if causal && j > i {
                            continue;
                        }
                        let gv = g[i * s + j] * inv_scale;
                        if gv != 0.0 {
                            for dd in 0..dk {
                                gq[i * dk + dd] += gv * vk[j * dk + dd];
                            }
                        }
                    }
                }
            }
            if needs(k) {
                let vq = &nodes[q.0].value.data;
                let gk = grad_mut(nodes, grads, k);
                for i in 0..t {
                    for j in 0..s {
                        if causal && j > i {
                            continue;
                        }
                        let gv = g[i * s + j] * inv_scale;
                        if gv != 0.0 {
                            for dd in 0..dk {
                                gk[j * dk + dd] += gv * vq[i * dk + dd];
                            }
                        }
                    }
                }
            }
        }
        Op::Dropout(a, mask) => {
            if needs(*a) {
                let ga = grad_mut(nodes, grads, *a);
                for ((d, &x), &m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += x * m;
                }
            }
        }
        &Op::Reshape(a) => {
            if needs(a) {
                let ga = grad_mut(nodes, grads, a);
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += x;
                }
            }
        }
        Op::PickPerRow(a, indices) => {
            if needs(*a) {
                let n = nodes[a.0].value.as_matrix().unwrap().1;
                let ga = grad_mut(nodes, grads, *a);
                for (i, &j) in indices.iter().enumerate() {
                    ga[i * n + j] += g[i];
                }
            }
        }
        &Op::SumAll(a) => {
            if needs(a) {
                let ga = grad_mut(nodes, grads, a);
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

const LN_EPS: f32 = 1e-5;

fn row_norm_stats(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v - max) as f64).exp();
        *o = e as f32;
        z += e;
    }
    let inv = (1.0 / z) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[inline]
fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_bwd(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

/// Central-difference gradient of `f` at `p`, one entry per coordinate.
/// The step actually realized in f32 is used as the divisor.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> f64, p: &Tensor, eps: f64) -> Vec<f64> {
    (0..p.numel())
        .map(|i| finite_diff_at(f, p, i, eps))
        .collect()
}

/// Central difference for a single coordinate of `p`.
pub fn finite_diff_at(
    f: &mut dyn FnMut(&Tensor) -> f64,
    p: &Tensor,
    coord: usize,
    eps: f64,
) -> f64 {
    assert!(eps > 0.0);
    let x = p.data()[coord];
    let xp = (x as f64 + eps) as f32;
    let xm = (x as f64 - eps) as f32;
    let mut plus = p.clone();
    plus.data_mut()[coord] = xp;
    let mut minus = p.clone();
    minus.data_mut()[coord] = xm;
    (f(&plus) - f(&minus)) / (xp as f64 - xm as f64)
}

/// Relative error between an analytic and a numeric derivative.
///
/// The denominator is floored at 0.05: below that, central differences of an
/// f32 forward pass at step 1e-3 are dominated by storage quantization
/// (observed ~1e-5 absolute), so the comparison degrades to an absolute check
/// at 5e-5 — still orders of magnitude tighter than any wrong gradient rule,
/// which errs at the scale of the gradient itself.
pub fn grad_rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(0.05);
    (analytic - numeric).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, vals: &[f32]) -> Tensor {
        Tensor::from_vec(vec![rows, cols], vals.to_vec())
    }

    #[test]
    fn matmul_with_identity_returns_input() {
        let mut tape = Tape::inference();
        let a = tape.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let eye = tape.leaf(
            t2(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]),
            false,
        );
        let out = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_shapes() {
        let mut tape = Tape::inference();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(Tensor::zeros(vec![3, 4]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        let bad = tape.matmul(b, a);
        assert!(matches!(bad, Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn mean_of_constant_is_constant() {
        let mut tape = Tape::inference();
        let a = tape.leaf(Tensor::filled(vec![5, 3], 2.5), false);
        let m = tape.mean_axis0(a).unwrap();
        assert_eq!(tape.value(m).data(), &[2.5, 2.5, 2.5]);
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let mut tape = Tape::inference();
        let a = tape.leaf(Tensor::from_vec(vec![1, 1], vec![3.0e38]), false);
        let err = tape.mul(a, a).unwrap_err();
        match err {
            TensorError::NonFinite { op } => assert_eq!(op, "mul"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn backward_of_sum_gives_ones_and_zero_for_unused() {
        let mut tape = Tape::inference();
        let p = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), true);
        let unused = tape.leaf(t2(1, 2, &[5.0, 6.0]), true);
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(tape.grad(unused), None);
        assert_eq!(tape.grad_or_zeros(unused), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_through_zero_scale_gives_zeros() {
        let mut tape = Tape::inference();
        let p = tape.leaf(t2(1, 3, &[1.0, -2.0, 3.0]), true);
        let z = tape.scale(p, 0.0).unwrap();
        let loss = tape.sum_all(z).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::inference();
        let p = tape.leaf(t2(1, 3, &[1.0, 2.0, 3.0]), true);
        assert!(matches!(
            tape.backward(p),
            Err(TensorError::LossNotScalar { .. })
        ));
    }

    #[test]
    fn dropout_eval_is_identity_and_train_rescales() {
        let mut tape = Tape::inference();
        let a = tape.leaf(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]), false);
        let d = tape.dropout(a, 0.5).unwrap();
        assert_eq!(a, d);

        let mut tape = Tape::training(7);
        let a = tape.leaf(Tensor::filled(vec![1, 1000], 1.0), false);
        let d = tape.dropout(a, 0.25).unwrap();
        let vals = tape.value(d).data();
        let kept = vals.iter().filter(|&&v| v != 0.0).count();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-6));
        assert!((600..900).contains(&kept), "kept {kept} of 1000 at p=0.25");
    }

    #[test]
    fn embedding_rejects_out_of_vocab() {
        let mut tape = Tape::inference();
        let table = tape.leaf(Tensor::zeros(vec![4, 2]), false);
        assert!(matches!(
            tape.embedding(table, &[0, 4]),
            Err(TensorError::TokenOutOfRange { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn causal_scores_mask_upper_triangle() {
        let mut tape = Tape::inference();
        let q = tape.leaf(Tensor::filled(vec![3, 2], 1.0), false);
        let k = tape.leaf(Tensor::filled(vec![3, 2], 1.0), false);
        let s = tape.attn_scores(q, k, true).unwrap();
        let v = tape.value(s).data();
        for i in 0..3 {
            for j in 0..3 {
                if j > i {
                    assert_eq!(v[i * 3 + j], MASKED);
                } else {
                    assert!((v[i * 3 + j] - 2.0 / 2.0f32.sqrt()).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn finite_diff_on_square_matches_analytic() {
        let p = Tensor::scalar(3.0);
        let mut f = |t: &Tensor| (t.data()[0] as f64).powi(2);
        let g = finite_diff_grad(&mut f, &p, 1e-3);
        assert!((g[0] - 6.0).abs() < 1e-4, "got {}", g[0]);

        let mut c = |_: &Tensor| 42.0;
        let g = finite_diff_grad(&mut c, &p, 1e-3);
        assert_eq!(g[0], 0.0);
    }

    /// Every differentiable op, exercised one at a time against central
    /// differences on a fixed random instance.
    #[test]
    fn per_op_gradient_check() {
        let mut rng = Rng::new(11);
        let build_loss = |which: usize, p: &Tensor| -> f64 {
            let mut tape = Tape::inference();
            let v = tape.leaf(p.clone(), true);
            run_op_chain(&mut tape, which, v)
        };
        // Re-run with a tape that records, then compare per coordinate.
        for which in 0..12 {
            let p = Tensor::randn(vec![3, 4], 0.8, &mut rng);
            let mut tape = Tape::inference();
            let v = tape.leaf(p.clone(), true);
            let sq = run_op_chain_var(&mut tape, which, v);
            let loss = tape.sum_all(sq).unwrap();
            tape.backward(loss).unwrap();
            let analytic = tape.grad_or_zeros(v);
            for coord in 0..p.numel() {
                let mut f = |t: &Tensor| build_loss(which, t);
                let numeric = finite_diff_at(&mut f, &p, coord, 1e-3);
                let err = grad_rel_err(analytic[coord] as f64, numeric);
                // 5e-3 is the realistic resolution of central differences
                // through an f32 forward at step 1e-3; rule errors are O(1).
                assert!(
                    err < 5e-3,
                    "op {which} coord {coord}: analytic {} vs numeric {numeric} (err {err})",
                    analytic[coord]
                );
            }
        }
    }

    fn run_op_chain_var(tape: &mut Tape, which: usize, v: Var) -> Var {
        // Mix with a fixed constant so matmul-style ops have a second operand.
        let other = {
            let mut r = Rng::new(99);
            let t = Tensor::randn(vec![4, 3], 0.7, &mut r);
            tape.leaf(t, false)
        };
        let mid = match which {
            0 => {
                let w = tape.matmul(v, other).unwrap();
                tape.gelu(w).unwrap()
            }
            1 => tape.mul(v, v).unwrap(),
            2 => tape.scale(v, -1.7).unwrap(),
            3 => {
                let m = tape.mean_axis0(v).unwrap();
                tape.reshape(m, vec![1, 4]).unwrap()
            }
            4 => tape.softmax(v).unwrap(),
            5 => tape.log_softmax(v).unwrap(),
            6 => {
                let g = {
                    let mut r = Rng::new(5);
                    let t = Tensor::randn(vec![4], 0.3, &mut r);
                    tape.leaf(t, false)
                };
                let b = tape.constant(Tensor::zeros(vec![4]));
                tape.layer_norm(v, g, b).unwrap()
            }
            7 => {
                let k = tape.slice_rows(v, 0, 2).unwrap();
                let q = tape.slice_rows(v, 1, 2).unwrap();
                tape.attn_scores(q, k, false).unwrap()
            }
            8 => {
                // Softmax the masked scores so the large mask constants do
                // not swamp the finite-difference numerator.
                let q = tape.slice_rows(v, 0, 3).unwrap();
                let s = tape.attn_scores(q, q, true).unwrap();
                tape.softmax(s).unwrap()
            }
            9 => {
                let a = tape.slice_cols(v, 0, 2).unwrap();
                let b = tape.slice_cols(v, 2, 2).unwrap();
                let c = tape.concat_cols(&[a, b]).unwrap();
                tape.concat_rows(&[c, c]).unwrap()
            }
            10 => tape.matmul_bt(v, v).unwrap(),
            11 => {
                let s = tape.softmax(v).unwrap();
                tape.pick_per_row(s, &[1, 0, 3]).unwrap()
            }
            _ => unreachable!(),
        };
        // Square before summing so every output coordinate matters.
        tape.mul(mid, mid).unwrap()
    }

    fn run_op_chain(tape: &mut Tape, which: usize, v: Var) -> f64 {
        let sq = run_op_chain_var(tape, which, v);
        tape.sum_f64(sq)
    }

    #[test]
    fn embedding_gradient_scatters_to_rows() {
        let mut tape = Tape::inference();
        let table = tape.leaf(t2(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]), true);
        let e = tape.embedding(table, &[2, 2, 0]).unwrap();
        let loss = tape.sum_all(e).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn determinism_same_seed_same_dropout() {
        let run = || {
            let mut tape = Tape::training(123);
            let a = tape.leaf(Tensor::filled(vec![2, 8], 1.0), true);
            let d = tape.dropout(a, 0.5).unwrap();
            let l = tape.sum_all(d).unwrap();
            tape.backward(l).unwrap();
            (
                tape.value(d).data().to_vec(),
                tape.grad(a).unwrap().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    mod properties {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f32..30.0, 12)) {
                let mut tape = Tape::inference();
                let a = tape.leaf(Tensor::from_vec(vec![3, 4], vals), false);
                let s = tape.softmax(a).unwrap();
                let d = tape.value(s).data();
                for i in 0..3 {
                    let row: f32 = d[i*4..(i+1)*4].iter().sum();
                    prop_assert!((row - 1.0).abs() < 1e-6);
                }
            }

            #[test]
            fn argmax_invariant_to_positive_rescale(
                vals in proptest::collection::vec(-10.0f32..10.0, 1..40),
                c in 0.01f32..100.0,
            ) {
                let scaled: Vec<f32> = vals.iter().map(|v| v * c).collect();
                prop_assert_eq!(argmax(&vals), argmax(&scaled));
            }
        }
    }
}
