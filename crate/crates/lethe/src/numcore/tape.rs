//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Tape`] records every primitive operation as it executes. Nodes are
//! append-only, so an operation's operands always precede it and the record
//! is acyclic by construction. [`Tape::backward`] walks the record once in
//! reverse from a scalar root and accumulates `d(root)/d(node)` for every
//! node, which makes any scalar built from these primitives differentiable
//! with respect to any leaf — model parameters, a single injected delta
//! vector, or one weight matrix — without per-objective gradient code.
//!
//! The forward value of each op is computed by the same kernels the plain
//! inference path uses, so a traced forward pass and an untraced one agree
//! bit for bit.

use super::matrix::{softmax_unchecked, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layer-norm epsilon shared by the traced and plain forward paths.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Row-wise layer norm: `(x - mean) / sqrt(var + eps) * gamma + beta`.
///
/// Returns the output plus the normalized rows and per-row inverse stddev
/// needed by the backward pass.
pub fn layer_norm_forward(x: &Matrix, gamma: &Matrix, beta: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let (rows, cols) = x.shape();
    assert_eq!(gamma.shape(), (1, cols), "layer_norm gamma shape");
    assert_eq!(beta.shape(), (1, cols), "layer_norm beta shape");
    let mut out = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(istd);
        for c in 0..cols {
            let h = (row[c] - mean) * istd;
            xhat.set(r, c, h);
            out.set(r, c, h * gamma.get(0, c) + beta.get(0, c));
        }
    }
    (out, xhat, inv_std)
}

/// Row-wise softmax as a matrix kernel.
pub fn row_softmax_forward(x: &Matrix) -> Matrix {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let p = softmax_unchecked(x.row(r));
        out.row_mut(r).copy_from_slice(&p);
    }
    out
}

enum Op {
    Leaf {
        trainable: bool,
    },
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// `mul * x + add` with scalar constants. The additive constant plays
    /// no role in backward but stays on the record so the op is fully
    /// described.
    AffineConst {
        x: ValueId,
        mul: f64,
        #[allow(dead_code)]
        add: f64,
    },
    MatMul(ValueId, ValueId),
    Transpose(ValueId),
    RowSoftmax(ValueId),
    Gelu(ValueId),
    Relu(ValueId),
    Ln(ValueId),
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    GatherRows {
        src: ValueId,
        ids: Vec<usize>,
    },
    SliceCols {
        src: ValueId,
        lo: usize,
        hi: usize,
    },
    ConcatCols(Vec<ValueId>),
    Pick {
        src: ValueId,
        row: usize,
        col: usize,
    },
    /// Copy of `x` with `row_vec` added to one row.
    AddAtRow {
        x: ValueId,
        row_vec: ValueId,
        row: usize,
    },
    SumAll(ValueId),
    MeanScalars(Vec<ValueId>),
    /// Mean over rows of `-log softmax(row)[target]`; `probs` caches the
    /// row-wise softmax for the backward pass.
    CrossEntropyMean {
        logits: ValueId,
        targets: Vec<usize>,
        probs: Matrix,
    },
    /// `sum_j p_j log p_j` of `softmax(logits_row)`, computed stably from
    /// the logits. Minimizing it maximizes entropy.
    NegEntropyRow {
        logits: ValueId,
        probs: Vec<f64>,
        log_probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients of one backward pass, indexed by [`ValueId`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`. Unreached nodes get a
    /// zero gradient of the right shape.
    pub fn wrt(&self, id: ValueId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Takes the gradient out without cloning.
    pub fn take(&mut self, id: ValueId) -> Matrix {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

/// Recorded computation: an append-only list of primitive operations rooted
/// (eventually) at a scalar loss.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Whether `id` is a trainable leaf (recorded via [`Tape::param`]).
    pub fn is_trainable(&self, id: ValueId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { trainable: true })
    }

    fn push(&mut self, op: Op, value: Matrix) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    /// Records a non-trainable leaf (inputs, constants, frozen weights).
    pub fn input(&mut self, value: Matrix) -> ValueId {
        self.push(Op::Leaf { trainable: false }, value)
    }

    /// Records a trainable leaf; `backward` reports gradients for these.
    pub fn param(&mut self, value: Matrix) -> ValueId {
        self.push(Op::Leaf { trainable: true }, value)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = self.value(a).add(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = self.value(a).sub(self.value(b));
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = self.value(a).mul_elem(self.value(b));
        self.push(Op::Mul(a, b), v)
    }

    /// Elementwise `a * x + b` with constants.
    pub fn affine(&mut self, x: ValueId, a: f64, b: f64) -> ValueId {
        let v = self.value(x).map(|t| a * t + b);
        self.push(Op::AffineConst { x, mul: a, add: b }, v)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn row_softmax(&mut self, a: ValueId) -> ValueId {
        let v = row_softmax_forward(self.value(a));
        self.push(Op::RowSoftmax(a), v)
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(gelu_scalar);
        self.push(Op::Gelu(a), v)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(|t| t.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn ln(&mut self, a: ValueId) -> ValueId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), v)
    }

    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> ValueId {
        let (out, xhat, inv_std) = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta));
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        )
    }

    /// Selects rows of `src` by index (embedding lookup, row extraction).
    pub fn gather_rows(&mut self, src: ValueId, ids: &[usize]) -> ValueId {
        let s = self.value(src);
        assert!(!ids.is_empty());
        assert!(ids.iter().all(|&i| i < s.rows()), "gather_rows out of range");
        let mut v = Matrix::zeros(ids.len(), s.cols());
        for (r, &i) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(s.row(i));
        }
        self.push(
            Op::GatherRows {
                src,
                ids: ids.to_vec(),
            },
            v,
        )
    }

    /// Column range `[lo, hi)` of `src`.
    pub fn slice_cols(&mut self, src: ValueId, lo: usize, hi: usize) -> ValueId {
        let s = self.value(src);
        assert!(lo < hi && hi <= s.cols(), "slice_cols range");
        let mut v = Matrix::zeros(s.rows(), hi - lo);
        for r in 0..s.rows() {
            v.row_mut(r).copy_from_slice(&s.row(r)[lo..hi]);
        }
        self.push(Op::SliceCols { src, lo, hi }, v)
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut at = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[at..at + m.cols()].copy_from_slice(m.row(r));
            }
            at += m.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    /// Scalar entry `src[row, col]`.
    pub fn pick(&mut self, src: ValueId, row: usize, col: usize) -> ValueId {
        let v = Matrix::scalar(self.value(src).get(row, col));
        self.push(Op::Pick { src, row, col }, v)
    }

    /// `x` with `row_vec` (a `1 x cols` matrix) added to row `row`.
    pub fn add_at_row(&mut self, x: ValueId, row_vec: ValueId, row: usize) -> ValueId {
        let xm = self.value(x);
        let rv = self.value(row_vec);
        assert_eq!(rv.rows(), 1);
        assert_eq!(rv.cols(), xm.cols());
        assert!(row < xm.rows());
        let mut v = xm.clone();
        for (o, d) in v.row_mut(row).iter_mut().zip(rv.row(0)) {
            *o += d;
        }
        self.push(Op::AddAtRow { x, row_vec, row }, v)
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let v = Matrix::scalar(self.value(a).data().iter().sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_scalars(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty());
        let sum: f64 = parts.iter().map(|p| self.value(*p).as_scalar()).sum();
        let v = Matrix::scalar(sum / parts.len() as f64);
        self.push(Op::MeanScalars(parts.to_vec()), v)
    }

    /// Mean next-token cross-entropy over the rows of a logits matrix.
    pub fn cross_entropy_mean(&mut self, logits: ValueId, targets: &[usize]) -> ValueId {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per logits row");
        assert!(targets.iter().all(|&t| t < l.cols()));
        let probs = row_softmax_forward(l);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            loss -= probs.get(r, t).ln();
        }
        loss /= targets.len() as f64;
        let v = Matrix::scalar(loss);
        self.push(
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            v,
        )
    }

    /// Negative entropy of `softmax(logits)` for a single-row logits matrix,
    /// computed from log-probabilities for stability. `0 * log 0` is 0.
    pub fn neg_entropy_row(&mut self, logits: ValueId) -> ValueId {
        let l = self.value(logits);
        assert_eq!(l.rows(), 1, "neg_entropy_row expects a single row");
        let row = l.row(0);
        let lse = super::matrix::log_sum_exp(row);
        let log_probs: Vec<f64> = row.iter().map(|z| z - lse).collect();
        let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        let s: f64 = probs
            .iter()
            .zip(log_probs.iter())
            .map(|(p, lp)| if *p > 0.0 { p * lp } else { 0.0 })
            .sum();
        let v = Matrix::scalar(s);
        self.push(
            Op::NegEntropyRow {
                logits,
                probs,
                log_probs,
            },
            v,
        )
    }

    /// Accumulates `d(root)/d(node)` for every node by a single reverse
    /// sweep. The root must be a scalar; the record must be well-formed
    /// (every operand recorded before its consumer).
    pub fn backward(&mut self, root: ValueId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::BadRecord("root not on this record".into()));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::BadRecord("root of backward must be a scalar".into()));
        }
        if !self.nodes[root.0].value.as_scalar().is_finite() {
            return Err(Error::NonFinite {
                context: "backward root".into(),
            });
        }
        self.check_well_formed()?;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Every operand id must be strictly smaller than its consumer's id.
    fn check_well_formed(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            let ok = node.parent_ids().iter().all(|p| p.0 < i);
            if !ok {
                return Err(Error::BadRecord(format!(
                    "node {i} consumes a value recorded at or after it"
                )));
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Matrix>], id: ValueId, delta: Matrix) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.clone());
                Self::accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let da = g.mul_elem(self.value(*b));
                let db = g.mul_elem(self.value(*a));
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::AffineConst { x, mul, .. } => {
                Self::accumulate(grads, *x, g.scale(*mul));
            }
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose());
                let db = self.value(*a).transpose().matmul(g);
                Self::accumulate(grads, *a, da);
                Self::accumulate(grads, *b, db);
            }
            Op::Transpose(a) => {
                Self::accumulate(grads, *a, g.transpose());
            }
            Op::RowSoftmax(a) => {
                let p = &self.nodes[i].value;
                let (rows, cols) = p.shape();
                let mut da = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let dot_gp: f64 = g.row(r).iter().zip(p.row(r)).map(|(x, y)| x * y).sum();
                    for c in 0..cols {
                        da.set(r, c, p.get(r, c) * (g.get(r, c) - dot_gp));
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    for c in 0..x.cols() {
                        da.set(r, c, g.get(r, c) * gelu_grad_scalar(x.get(r, c)));
                    }
                }
                Self::accumulate(grads, *a, da);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let da = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    if x.get(r, c) > 0.0 {
                        g.get(r, c)
                    } else {
                        0.0
                    }
                });
                Self::accumulate(grads, *a, da);
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let da = Matrix::from_fn(x.rows(), x.cols(), |r, c| g.get(r, c) / x.get(r, c));
                Self::accumulate(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                for r in 0..rows {
                    // dl/dxhat_c = g_c * gamma_c; fold the two row means of
                    // the standard layer-norm backward.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for c in 0..cols {
                        let dxh = g.get(r, c) * gm.get(0, c);
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat.get(r, c);
                    }
                    let inv_n = 1.0 / cols as f64;
                    for c in 0..cols {
                        let dxh = g.get(r, c) * gm.get(0, c);
                        let v = inv_std[r]
                            * (dxh - inv_n * sum_dxhat - xhat.get(r, c) * inv_n * sum_dxhat_xhat);
                        dx.set(r, c, v);
                        dgamma.set(0, c, dgamma.get(0, c) + g.get(r, c) * xhat.get(r, c));
                        dbeta.set(0, c, dbeta.get(0, c) + g.get(r, c));
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gamma, dgamma);
                Self::accumulate(grads, *beta, dbeta);
            }
            Op::GatherRows { src, ids } => {
                let s = self.value(*src);
                let mut ds = Matrix::zeros(s.rows(), s.cols());
                for (r, &i_src) in ids.iter().enumerate() {
                    for (o, v) in ds.row_mut(i_src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                Self::accumulate(grads, *src, ds);
            }
            Op::SliceCols { src, lo, hi } => {
                let s = self.value(*src);
                let mut ds = Matrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    ds.row_mut(r)[*lo..*hi].copy_from_slice(g.row(r));
                }
                Self::accumulate(grads, *src, ds);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    let rows = self.value(*p).rows();
                    let mut dp = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + cols]);
                    }
                    Self::accumulate(grads, *p, dp);
                    at += cols;
                }
            }
            Op::Pick { src, row, col } => {
                let s = self.value(*src);
                let mut ds = Matrix::zeros(s.rows(), s.cols());
                ds.set(*row, *col, g.as_scalar());
                Self::accumulate(grads, *src, ds);
            }
            Op::AddAtRow { x, row_vec, row } => {
                let dr = Matrix::row_vector(g.row(*row));
                Self::accumulate(grads, *x, g.clone());
                Self::accumulate(grads, *row_vec, dr);
            }
            Op::SumAll(a) => {
                let s = self.value(*a);
                let da = Matrix::from_fn(s.rows(), s.cols(), |_, _| g.as_scalar());
                Self::accumulate(grads, *a, da);
            }
            Op::MeanScalars(parts) => {
                let share = g.as_scalar() / parts.len() as f64;
                for p in parts {
                    Self::accumulate(grads, *p, Matrix::scalar(share));
                }
            }
            Op::CrossEntropyMean {
                logits,
                targets,
                probs,
            } => {
                let scale = g.as_scalar() / targets.len() as f64;
                let mut dl = probs.scale(scale);
                for (r, &t) in targets.iter().enumerate() {
                    dl.set(r, t, dl.get(r, t) - scale);
                }
                Self::accumulate(grads, *logits, dl);
            }
            Op::NegEntropyRow {
                logits,
                probs,
                log_probs,
            } => {
                let s = self.nodes[i].value.as_scalar();
                let gs = g.as_scalar();
                let mut dl = Matrix::zeros(1, probs.len());
                for (j, (p, lp)) in probs.iter().zip(log_probs.iter()).enumerate() {
                    dl.set(0, j, gs * p * (lp - s));
                }
                Self::accumulate(grads, *logits, dl);
            }
        }
    }
}

impl Node {
    fn parent_ids(&self) -> Vec<ValueId> {
        match &self.op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::AffineConst { x: a, .. }
            | Op::Transpose(a)
            | Op::RowSoftmax(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Ln(a)
            | Op::SumAll(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::GatherRows { src, .. } | Op::SliceCols { src, .. } | Op::Pick { src, .. } => {
                vec![*src]
            }
            Op::ConcatCols(parts) | Op::MeanScalars(parts) => parts.clone(),
            Op::AddAtRow { x, row_vec, .. } => vec![*x, *row_vec],
            Op::CrossEntropyMean { logits, .. } | Op::NegEntropyRow { logits, .. } => {
                vec![*logits]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::scalar(3.0));
        let y = tape.param(Matrix::scalar(4.0));
        let root = tape.mul(x, y);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.wrt(x).as_scalar(), 4.0);
        assert_eq!(grads.wrt(y).as_scalar(), 3.0);
    }

    #[test]
    fn softmax_sum_is_constant() {
        let mut tape = Tape::new();
        let z = tape.param(Matrix::row_vector(&[0.3, -1.2, 2.0, 0.0]));
        let p = tape.row_softmax(z);
        let root = tape.sum_all(p);
        let grads = tape.backward(root).unwrap();
        assert!(grads.wrt(z).max_abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::row_vector(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::scalar(3.0));
        let unused = tape.param(Matrix::row_vector(&[1.0, 2.0, 3.0]));
        let root = tape.mul(x, x);
        let grads = tape.backward(root).unwrap();
        assert_eq!(grads.wrt(unused).shape(), (1, 3));
        assert_eq!(grads.wrt(unused).max_abs(), 0.0);
        assert_eq!(grads.wrt(x).as_scalar(), 6.0);
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let mut tape = Tape::new();
        let logits = tape.param(Matrix::from_vec(1, 3, vec![0.1, 0.9, -0.4]).unwrap());
        let loss = tape.cross_entropy_mean(logits, &[1]);
        let p = softmax_unchecked(&[0.1, 0.9, -0.4]);
        assert!((tape.value(loss).as_scalar() + p[1].ln()).abs() < 1e-12);
    }

    #[test]
    fn neg_entropy_known_values() {
        // Uniform over 4: sum p ln p = -ln 4. One-hot-ish via huge logit: 0.
        let mut tape = Tape::new();
        let uniform = tape.input(Matrix::row_vector(&[0.0; 4]));
        let s = tape.neg_entropy_row(uniform);
        assert!((tape.value(s).as_scalar() + 4.0f64.ln()).abs() < 1e-12);

        let spiked = tape.input(Matrix::row_vector(&[200.0, 0.0, 0.0, 0.0]));
        let s2 = tape.neg_entropy_row(spiked);
        assert!(tape.value(s2).as_scalar().abs() < 1e-12);
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.param(Matrix::from_fn(3, 3, |r, c| ((r * 3 + c) as f64).sin()));
            let b = tape.param(Matrix::from_fn(3, 3, |r, c| ((r + c) as f64).cos()));
            let c = tape.matmul(a, b);
            let d = tape.gelu(c);
            let root = tape.sum_all(d);
            let grads = tape.backward(root).unwrap();
            (
                tape.value(root).as_scalar().to_bits(),
                grads
                    .wrt(a)
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }
}
