//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends one node to the tape. Inputs always precede
//! outputs, so the node order is a topological order and the backward pass is
//! a single reverse sweep.

use std::cell::Cell;

use crate::error::{NdError, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation identifiers, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    MatMul,
    Transpose,
    Reshape,
    Softmax,
    LayerNorm,
    Gelu,
    SliceCols,
    ConcatCols,
    SliceRows,
    ConcatRows,
    GatherMean,
    MeanRows,
    Sum,
    Mean,
    RowNormalize,
    BceWithLogits,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::GatherMean => "gather_mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::RowNormalize => "row_normalize",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::SliceRows,
        OpKind::ConcatRows,
        OpKind::GatherMean,
        OpKind::MeanRows,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::RowNormalize,
        OpKind::BceWithLogits,
    ];
}

thread_local! {
    static FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Deliberately corrupts one backward rule on the current thread.
///
/// Used by self-check fault-injection fixtures; the corrupted rule scales its
/// input gradients by 1.5.
pub mod fault {
    use super::{OpKind, FAULT};

    pub fn inject(kind: OpKind) {
        FAULT.with(|f| f.set(Some(kind)));
    }

    pub fn clear() {
        FAULT.with(|f| f.set(None));
    }

    pub fn active() -> Option<OpKind> {
        FAULT.with(|f| f.get())
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherMean { x: Var, rows: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    RowNormalize { x: Var, eps: f64 },
    BceWithLogits { logits: Var, labels: Tensor },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::GatherMean { .. } => OpKind::GatherMean,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::RowNormalize { .. } => OpKind::RowNormalize,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Gelu(x)
            | Op::MeanRows(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. }
            | Op::GatherMean { x, .. }
            | Op::RowNormalize { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    saved: Vec<f64>,
    grad: Option<Tensor>,
}

/// One recorded entry, as exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeEntry {
    pub op: OpKind,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Recorded computation. Create one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NdError {
    NdError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Splits a shape around `axis` into (outer, n, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax of raw data along `axis`.
pub fn softmax_values(shape: &[usize], data: &[f64], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| data[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                let e = (data[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, saved: Vec<f64>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, saved, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, saved: vec![], grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last backward pass, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn entries(&self) -> Vec<TapeEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| TapeEntry { op: n.op.kind(), inputs: n.op.inputs(), output: Var(i) })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, vec![]))
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over the leading axes.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.last_dim();
        if tb.numel() != n || tb.ndim() != 1 {
            return Err(mismatch("add_row", tx, tb));
        }
        let bias = tb.data();
        let data = tx.data().iter().enumerate().map(|(i, &v)| v + bias[i % n]).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, b), vec![]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), vec![])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), vec![])
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2().map_err(|_| mismatch("matmul", ta, tb))?;
        let (k2, n) = tb.dims2().map_err(|_| mismatch("matmul", ta, tb))?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), vec![]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose2()?;
        Ok(self.push(value, Op::Transpose(x), vec![]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), vec![]))
    }

    // ----- normalization -----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.ndim() {
            return Err(NdError::Axis { axis, shape: t.shape().to_vec() });
        }
        let data = softmax_values(t.shape(), t.data(), axis);
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax { x, axis }, vec![]))
    }

    /// Layer normalization over the last axis followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = tx.numel() / d.max(1);
        let mut out = vec![0.0; tx.numel()];
        let mut saved = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let slice = &tx.data()[r * d..(r + 1) * d];
            let mean = slice.iter().sum::<f64>() / d as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (slice[j] - mean) * rstd * tg.data()[j] + tb.data()[j];
            }
            saved.push(mean);
            saved.push(rstd);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }, saved))
    }

    /// `x / (||x|| + eps)` for every slice along the last axis.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = t.last_dim().max(1);
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for chunk in out.chunks_mut(d) {
            let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            chunk.iter_mut().for_each(|v| *v /= n + eps);
            norms.push(n);
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::RowNormalize { x, eps }, norms)
    }

    // ----- structural -----

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if start + len > c {
            return Err(NdError::Index { op: "slice_cols", index: start + len, len: c });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new([r, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start }, vec![]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NdError::Empty { op: "concat_cols" });
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new([r, total], out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), vec![]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if start + len > r {
            return Err(NdError::Index { op: "slice_rows", index: start + len, len: r });
        }
        let value = Tensor::new([len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, start }, vec![]))
    }

    /// Stacks matrices (or vectors, as single rows) along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NdError::Empty { op: "concat_rows" });
        }
        let d = self.value(parts[0]).last_dim();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.ndim() > 2 || t.last_dim() != d {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            rows += t.numel() / d.max(1);
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new([rows, d], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), vec![]))
    }

    /// Mean of the selected rows of a `[r, d]` matrix, as a `[d]` vector.
    pub fn gather_mean(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, d) = t.dims2()?;
        if rows.is_empty() {
            return Err(NdError::Empty { op: "gather_mean" });
        }
        let mut out = vec![0.0; d];
        for &i in rows {
            if i >= r {
                return Err(NdError::Index { op: "gather_mean", index: i, len: r });
            }
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::vector(out);
        Ok(self.push(value, Op::GatherMean { x, rows: rows.to_vec() }, vec![]))
    }

    /// Column-wise mean of a `[r, d]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, d) = t.dims2()?;
        if r == 0 {
            return Err(NdError::Empty { op: "mean_rows" });
        }
        let mut out = vec![0.0; d];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), vec![]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), vec![])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), vec![])
    }

    // ----- losses -----

    /// Mean binary cross-entropy on logits, via
    /// `max(s, 0) - s*y + ln(1 + exp(-|s|))`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &Tensor) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != labels.shape() {
            return Err(mismatch("bce_with_logits", t, labels));
        }
        if let Some(&bad) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(NdError::NonBinaryLabel { op: "bce_with_logits", value: bad });
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&s, &y)| s.max(0.0) - s * y + (-s.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / t.numel().max(1) as f64);
        Ok(self.push(value, Op::BceWithLogits { logits, labels: labels.clone() }, vec![]))
    }

    // ----- composites -----

    /// `u·v / ((||u|| + eps)(||v|| + eps))` as a scalar node.
    pub fn cosine_similarity(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        if self.shape(u) != self.shape(v) {
            return Err(mismatch("cosine_similarity", self.value(u), self.value(v)));
        }
        let nu = self.row_normalize(u, eps);
        let nv = self.row_normalize(v, eps);
        let prod = self.mul(nu, nv)?;
        Ok(self.sum(prod))
    }

    // ----- backward -----

    /// Reverse sweep from a scalar loss; gradients accumulate on every node
    /// reachable from a grad-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(NdError::NonScalar { shape: t.shape().to_vec() });
        }
        let seed = Tensor::full(t.shape().to_vec(), 1.0);
        self.backward_with_seed(loss, &seed)
    }

    /// Vector-Jacobian product: propagates `seed` (same shape as `out`) back
    /// through the tape. Existing gradients are cleared first.
    pub fn backward_with_seed(&mut self, out: Var, seed: &Tensor) -> Result<()> {
        if self.value(out).shape() != seed.shape() {
            return Err(mismatch("backward", self.value(out), seed));
        }
        self.zero_grads();
        self.nodes[out.0].grad = Some(seed.clone());
        let fault = fault::active();
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.as_ref() else { continue };
            let mut deltas = self.local_grads(i, g.data())?;
            if fault == Some(self.nodes[i].op.kind()) {
                for (_, d) in &mut deltas {
                    d.iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (v, d) in deltas {
                self.accumulate(v, d);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            None => {
                let shape = node.value.shape().to_vec();
                node.grad = Some(Tensor::new(shape, delta).expect("gradient shape"));
            }
        }
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(x, b) => {
                let n = val(*b).numel();
                let mut db = vec![0.0; n];
                for (k, v) in g.iter().enumerate() {
                    db[k % n] += v;
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.dims2()?;
                let n = tb.dims2()?.1;
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, tb.data(), true, &mut da, 0.0);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g, false, &mut db, 0.0);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(x) => {
                let (r, c) = node.value.dims2()?;
                let mut dx = vec![0.0; r * c];
                for p in 0..r {
                    for q in 0..c {
                        dx[q * r + p] = g[p * c + q];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for q in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + q;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gain, bias } => {
                let tx = val(*x);
                let gain_v = val(*gain).data();
                let d = tx.last_dim();
                let rows = tx.numel() / d.max(1);
                let mut dx = vec![0.0; tx.numel()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let (mean, rstd) = (node.saved[2 * r], node.saved[2 * r + 1]);
                    let xs = &tx.data()[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..d {
                        xhat[j] = (xs[j] - mean) * rstd;
                        dxhat[j] = gs[j] * gain_v[j];
                        dgain[j] += gs[j] * xhat[j];
                        dbias[j] += gs[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Gelu(x) => {
                let dx = g.iter().zip(val(*x).data()).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                vec![(*x, dx)]
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).dims2()?;
                let len = node.value.dims2()?.1;
                let mut dx = vec![0.0; r * c];
                for p in 0..r {
                    dx[p * c + start..p * c + start + len].copy_from_slice(&g[p * len..(p + 1) * len]);
                }
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2()?;
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = val(p).dims2()?.1;
                    let mut dp = Vec::with_capacity(r * w);
                    for q in 0..r {
                        dp.extend_from_slice(&g[q * total + offset..q * total + offset + w]);
                    }
                    offset += w;
                    res.push((p, dp));
                }
                res
            }
            Op::SliceRows { x, start } => {
                let tx = val(*x);
                let c = tx.dims2()?.1;
                let mut dx = vec![0.0; tx.numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let n = val(p).numel();
                    res.push((p, g[offset..offset + n].to_vec()));
                    offset += n;
                }
                res
            }
            Op::GatherMean { x, rows } => {
                let tx = val(*x);
                let d = tx.dims2()?.1;
                let mut dx = vec![0.0; tx.numel()];
                let inv = 1.0 / rows.len() as f64;
                for &r in rows {
                    for j in 0..d {
                        dx[r * d + j] += g[j] * inv;
                    }
                }
                vec![(*x, dx)]
            }
            Op::MeanRows(x) => {
                let (r, d) = val(*x).dims2()?;
                let inv = 1.0 / r as f64;
                let dx = (0..r * d).map(|k| g[k % d] * inv).collect();
                vec![(*x, dx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n.max(1) as f64; n])]
            }
            Op::RowNormalize { x, eps } => {
                let tx = val(*x);
                let d = tx.last_dim().max(1);
                let mut dx = vec![0.0; tx.numel()];
                for (r, &n) in node.saved.iter().enumerate() {
                    let xs = &tx.data()[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let denom = n + eps;
                    let xg: f64 = xs.iter().zip(gs).map(|(a, b)| a * b).sum();
                    let coef = if n > 0.0 { xg / (denom * denom * n) } else { 0.0 };
                    for j in 0..d {
                        dx[r * d + j] = gs[j] / denom - xs[j] * coef;
                    }
                }
                vec![(*x, dx)]
            }
            Op::BceWithLogits { logits, labels } => {
                let s = val(*logits).data();
                let inv = g[0] / s.len().max(1) as f64;
                let dx = s.iter().zip(labels.data()).map(|(&sv, &y)| (sigmoid(sv) - y) * inv).collect();
                vec![(*logits, dx)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let b = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let out = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let z = tape.constant(Tensor::from_rows(&[vec![0.0], vec![0.0]]));
        let out = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-12 && d[2] < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 2]));
        assert!(matches!(tape.softmax(x, 2), Err(NdError::Axis { .. })));
    }

    #[test]
    fn layer_norm_constant_slice_and_zero_gain() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2.5, 2.5, 2.5]));
        let g = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::zeros([3]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-12));

        let x = tape.constant(Tensor::vector(vec![1.0, -4.0, 9.0]));
        let g0 = tape.constant(Tensor::zeros([3]));
        let bias = tape.constant(Tensor::vector(vec![0.5, 0.25, -1.0]));
        let y = tape.layer_norm(x, g0, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.25, -1.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(NdError::NonScalar { .. })));
    }

    #[test]
    fn shared_node_accumulates_both_branches() {
        // f(x) = sum(3x) + sum(x*x) through one shared leaf, against two
        // independent leaves holding the same value.
        let data = vec![0.5, -1.5, 2.0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(data.clone()), true);
        let a = tape.scale(x, 3.0);
        let a = tape.sum(a);
        let b = tape.mul(x, x).unwrap();
        let b = tape.sum(b);
        let l = tape.add(a, b).unwrap();
        tape.backward(l).unwrap();
        let shared = tape.grad(x).unwrap().clone();

        let mut tape = Tape::new();
        let x1 = tape.leaf(Tensor::vector(data.clone()), true);
        let x2 = tape.leaf(Tensor::vector(data), true);
        let a = tape.scale(x1, 3.0);
        let a = tape.sum(a);
        let b = tape.mul(x2, x2).unwrap();
        let b = tape.sum(b);
        let l = tape.add(a, b).unwrap();
        tape.backward(l).unwrap();
        let g1 = tape.grad(x1).unwrap().data();
        let g2 = tape.grad(x2).unwrap().data();
        for k in 0..3 {
            assert_eq!(shared.data()[k], g1[k] + g2[k]);
        }
    }

    #[test]
    fn cosine_similarity_cases() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::vector(vec![1.0, 2.0, -3.0]), true);
        let c = tape.cosine_similarity(u, u, 1e-8).unwrap();
        assert!((tape.value(c).item().unwrap() - 1.0).abs() < 1e-6);

        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 4.0]));
        let c = tape.cosine_similarity(a, b, 1e-8).unwrap();
        assert_eq!(tape.value(c).item().unwrap(), 0.0);

        let z = tape.leaf(Tensor::zeros([3]), true);
        let v = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let c = tape.cosine_similarity(z, v, 1e-8).unwrap();
        assert_eq!(tape.value(c).item().unwrap(), 0.0);
        tape.backward(c).unwrap();
        assert!(tape.grad(z).unwrap().all_finite());
    }

    #[test]
    fn bce_closed_forms() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let y = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let l = tape.bce_with_logits(s, &y).unwrap();
        assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let s = tape.leaf(Tensor::from_rows(&[vec![40.0, -40.0]]), true);
        let l = tape.bce_with_logits(s, &y).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!(v.is_finite() && v >= 0.0 && v < 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(s).unwrap().all_finite());

        let bad = Tensor::from_rows(&[vec![0.5, 0.0]]);
        let s = tape.constant(Tensor::zeros([1, 2]));
        assert!(matches!(tape.bce_with_logits(s, &bad), Err(NdError::NonBinaryLabel { .. })));
    }

    #[test]
    fn entries_are_topologically_ordered() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2, 2]), true);
        let y = tape.matmul(x, x).unwrap();
        let z = tape.gelu(y);
        let _ = tape.mean(z);
        for e in tape.entries() {
            assert!(e.inputs.iter().all(|i| i.index() < e.output.index()));
        }
    }

    #[test]
    fn fault_injection_is_thread_local_and_scales_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let y = tape.scale(x, 2.0);
        let s = tape.sum(y);
        fault::inject(OpKind::Scale);
        tape.backward(s).unwrap();
        fault::clear();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 3.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }
}
