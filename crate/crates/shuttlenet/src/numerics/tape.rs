//! Reverse-mode automatic differentiation over a small tensor op set.
//!
//! Operations are recorded define-by-run: each call computes the forward
//! value immediately and appends a node to the tape. Node indices are
//! already in topological order, so the backward pass is a single reverse
//! sweep that visits each node exactly once. The tape is rebuilt for every
//! training step.

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{self, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Elementwise operation selector for the unified entry point.
/// `Max0` is the same function as `Relu`; both names are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Max0,
}

enum Op {
    Leaf {
        param: Option<usize>,
        name: Option<String>,
    },
    MatMul(ValueId, ValueId),
    /// `x . w^T`, the batch-major linear map for `[out,in]` weights.
    Linear(ValueId, ValueId),
    Transpose(ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Sigmoid(ValueId),
    Tanh(ValueId),
    Relu(ValueId),
    SoftmaxRows(ValueId),
    BroadcastRow {
        v: ValueId,
        rows: usize,
    },
    BroadcastCol {
        v: ValueId,
        cols: usize,
    },
    ConcatCols(Vec<ValueId>),
    SliceCol {
        x: ValueId,
        col: usize,
    },
    Reshape(ValueId),
    Sum(ValueId),
    /// Training-mode batch normalization (no scale, bias added separately).
    /// Batch statistics are cached for the backward rule.
    BatchNorm {
        x: ValueId,
        eps: f64,
        mean: Tensor,
        var: Tensor,
    },
    /// Mean cross-entropy of row-wise softmax against integer labels.
    CrossEntropy {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

impl Op {
    fn describe(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear(..) => "linear",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax",
            Op::BroadcastRow { .. } => "broadcast_row",
            Op::BroadcastCol { .. } => "broadcast_col",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCol { .. } => "slice_col",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::BatchNorm { .. } => "batch_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient tape. One per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Batch statistics produced by a training-mode batch-norm node, for
/// updating running statistics outside the tape.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
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

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, value });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a constant input (no gradient is collected for it).
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf { param: None, name: None }, value)
    }

    pub fn constant_named(&mut self, value: Tensor, name: &str) -> ValueId {
        self.push(
            Op::Leaf {
                param: None,
                name: Some(name.to_string()),
            },
            value,
        )
    }

    /// Bind a stored parameter as a leaf; `backward` routes its gradient
    /// into the store's accumulator.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<ValueId> {
        let slot = store.slot(name)?;
        let value = store.value(slot).clone();
        Ok(self.push(
            Op::Leaf {
                param: Some(slot),
                name: Some(name.to_string()),
            },
            value,
        ))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `x . w^T`: `[b,in] x [out,in] -> [b,out]`.
    pub fn linear(&mut self, x: ValueId, w: ValueId) -> Result<ValueId> {
        let value = tensor::matmul_nt(self.value(x), self.value(w))?;
        Ok(self.push(Op::Linear(x, w), value))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        let value = tensor::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.binary_forward("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.binary_forward("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.binary_forward("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let value = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let value = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let value = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    /// Unified elementwise entry point. Unary ops take one operand,
    /// binary ops take two (scalar-or-same-shape broadcasting only).
    pub fn elementwise(&mut self, op: ElementwiseOp, operands: &[ValueId]) -> Result<ValueId> {
        let need = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if operands.len() != need {
            return Err(Error::contract(format!(
                "{op:?} takes {need} operand(s), got {}",
                operands.len()
            )));
        }
        match op {
            ElementwiseOp::Add => self.add(operands[0], operands[1]),
            ElementwiseOp::Sub => self.sub(operands[0], operands[1]),
            ElementwiseOp::Mul => self.mul(operands[0], operands[1]),
            ElementwiseOp::Sigmoid => Ok(self.sigmoid(operands[0])),
            ElementwiseOp::Tanh => Ok(self.tanh(operands[0])),
            ElementwiseOp::Relu | ElementwiseOp::Max0 => Ok(self.relu(operands[0])),
        }
    }

    /// Row-wise softmax with max-subtraction. Rank-1 input is one row.
    pub fn softmax(&mut self, a: ValueId) -> Result<ValueId> {
        let input = self.value(a);
        let (rows, cols) = row_view(input)?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let src = &input.data()[r * cols..(r + 1) * cols];
            softmax_row(src, &mut out[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(input.shape(), out)?;
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    /// Repeat a rank-1 vector as every row of a `[rows, n]` matrix.
    pub fn broadcast_row(&mut self, v: ValueId, rows: usize) -> Result<ValueId> {
        let src = self.value(v);
        if src.rank() != 1 {
            return Err(Error::dim("broadcast_row", src.shape(), &[rows]));
        }
        let n = src.len();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(src.data());
        }
        let value = Tensor::new(&[rows, n], out)?;
        Ok(self.push(Op::BroadcastRow { v, rows }, value))
    }

    /// Repeat a `[b,1]` column as every column of a `[b, cols]` matrix.
    pub fn broadcast_col(&mut self, v: ValueId, cols: usize) -> Result<ValueId> {
        let src = self.value(v);
        if src.rank() != 2 || src.shape()[1] != 1 {
            return Err(Error::dim("broadcast_col", src.shape(), &[cols]));
        }
        let b = src.shape()[0];
        let mut out = Vec::with_capacity(b * cols);
        for r in 0..b {
            let x = src.data()[r];
            out.extend(std::iter::repeat(x).take(cols));
        }
        let value = Tensor::new(&[b, cols], out)?;
        Ok(self.push(Op::BroadcastCol { v, cols }, value))
    }

    /// Concatenate rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols needs at least one part"));
        }
        let rows = self.value(parts[0]).shape()[0];
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), t.shape()));
            }
            total += t.shape()[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Extract column `col` of a rank-2 tensor as `[b,1]`.
    pub fn slice_col(&mut self, x: ValueId, col: usize) -> Result<ValueId> {
        let t = self.value(x);
        if t.rank() != 2 || col >= t.shape()[1] {
            return Err(Error::dim("slice_col", t.shape(), &[col]));
        }
        let (b, n) = (t.shape()[0], t.shape()[1]);
        let out: Vec<f64> = (0..b).map(|r| t.data()[r * n + col]).collect();
        let value = Tensor::new(&[b, 1], out)?;
        Ok(self.push(Op::SliceCol { x, col }, value))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(total))
    }

    /// Multiply by a compile-time constant (records a constant scalar node).
    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId> {
        let c = self.constant(Tensor::scalar(factor));
        self.mul(a, c)
    }

    /// Training-mode batch normalization over the batch axis of `[b,f]`:
    /// per feature `(x - mean) / sqrt(var + eps)` with the biased variance.
    /// Returns the normalized node plus the batch statistics so the caller
    /// can update running statistics. Requires `b >= 2`.
    pub fn batch_norm_train(&mut self, x: ValueId, eps: f64) -> Result<(ValueId, BatchStats)> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim("batch_norm", t.shape(), &[]));
        }
        let (b, f) = (t.shape()[0], t.shape()[1]);
        if b < 2 {
            return Err(Error::contract(format!(
                "batch_norm_train needs batch size >= 2 (variance is degenerate), got {b}"
            )));
        }
        let mut mean = vec![0.0; f];
        for r in 0..b {
            for (m, &v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= b as f64;
        }
        let mut var = vec![0.0; f];
        for r in 0..b {
            for (j, &v) in t.row(r).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= b as f64;
        }
        let mut out = vec![0.0; b * f];
        for r in 0..b {
            for j in 0..f {
                out[r * f + j] = (t.at2(r, j) - mean[j]) / (var[j] + eps).sqrt();
            }
        }
        let mean = Tensor::new(&[f], mean)?;
        let var = Tensor::new(&[f], var)?;
        let stats = BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        let value = Tensor::new(&[b, f], out)?;
        let id = self.push(Op::BatchNorm { x, eps, mean, var }, value);
        Ok((id, stats))
    }

    /// Mean cross-entropy of row-wise softmax logits against labels,
    /// computed with max-subtraction.
    pub fn cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::dim("cross_entropy", t.shape(), &[labels.len()]));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = t.row(r);
            softmax_row(row, &mut probs[r * c..(r + 1) * c]);
            // log-sum-exp form: stable, and NaN/Inf logits propagate into
            // the loss instead of being clamped away.
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
        }
        loss /= b as f64;
        let probs = Tensor::new(&[b, c], probs)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// First node holding a NaN/Inf value, described for diagnostics.
    pub fn first_nonfinite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.all_finite() {
                None
            } else {
                let label = match &n.op {
                    Op::Leaf { name: Some(name), .. } => name.clone(),
                    op => format!("{} node #{i}", op.describe()),
                };
                Some(label)
            }
        })
    }

    /// Reverse sweep from a scalar loss. Parameter gradients are added
    /// into the store's accumulators; the tape is consumed.
    pub fn backward(self, loss: ValueId, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |id: ValueId| -> &Tensor { &self.nodes[id.0].value };

            match &node.op {
                Op::Leaf { param, .. } => {
                    if let Some(slot) = param {
                        store.accumulate_grad(*slot, &g)?;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = tensor::matmul_nt(&g, val(*b))?;
                    let db = tensor::matmul_tn(val(*a), &g)?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Linear(x, w) => {
                    let dx = tensor::matmul(&g, val(*w))?;
                    let dw = tensor::matmul_tn(&g, val(*x))?;
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                }
                Op::Transpose(a) => {
                    acc(&mut grads, *a, tensor::transpose(&g)?);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, fit(&g, val(*a)));
                    acc(&mut grads, *b, fit(&g, val(*b)));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, fit(&g, val(*a)));
                    let mut db = fit(&g, val(*b));
                    for v in db.data_mut() {
                        *v = -*v;
                    }
                    acc(&mut grads, *b, db);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(&mut grads, *a, fit(&hadamard_bc(&g, bv), av));
                    acc(&mut grads, *b, fit(&hadamard_bc(&g, av), bv));
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= y * (1.0 - y);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    for (dv, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *dv *= 1.0 - y * y;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    for (dv, &x) in d.data_mut().iter_mut().zip(val(*a).data()) {
                        if x <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (rows, cols) = row_view(y)?;
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            d[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(y.shape(), d)?);
                }
                Op::BroadcastRow { v, rows } => {
                    let n = val(*v).len();
                    let mut d = vec![0.0; n];
                    for r in 0..*rows {
                        for (dj, &gj) in d.iter_mut().zip(&g.data()[r * n..(r + 1) * n]) {
                            *dj += gj;
                        }
                    }
                    acc(&mut grads, *v, Tensor::new(&[n], d)?);
                }
                Op::BroadcastCol { v, cols } => {
                    let b = val(*v).shape()[0];
                    let mut d = vec![0.0; b];
                    for (r, dr) in d.iter_mut().enumerate() {
                        *dr = g.data()[r * cols..(r + 1) * cols].iter().sum();
                    }
                    acc(&mut grads, *v, Tensor::new(&[b, 1], d)?);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.shape()[0];
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).shape()[1];
                        let mut d = vec![0.0; rows * w];
                        for r in 0..rows {
                            d[r * w..(r + 1) * w]
                                .copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, Tensor::new(&[rows, w], d)?);
                    }
                }
                Op::SliceCol { x, col } => {
                    let xs = val(*x).shape();
                    let (b, n) = (xs[0], xs[1]);
                    let mut d = vec![0.0; b * n];
                    for r in 0..b {
                        d[r * n + col] = g.data()[r];
                    }
                    acc(&mut grads, *x, Tensor::new(&[b, n], d)?);
                }
                Op::Reshape(x) => {
                    acc(&mut grads, *x, g.reshaped(val(*x).shape())?);
                }
                Op::Sum(a) => {
                    acc(&mut grads, *a, Tensor::filled(val(*a).shape(), g.item()));
                }
                Op::BatchNorm { x, eps, mean, var } => {
                    let xv = val(*x);
                    let (b, f) = (xv.shape()[0], xv.shape()[1]);
                    let bf = b as f64;
                    let mut d = vec![0.0; b * f];
                    for j in 0..f {
                        let inv_std = 1.0 / (var.data()[j] + eps).sqrt();
                        let mu = mean.data()[j];
                        let mut g_mean = 0.0;
                        let mut gx_mean = 0.0;
                        for r in 0..b {
                            let xhat = (xv.at2(r, j) - mu) * inv_std;
                            let gj = g.at2(r, j);
                            g_mean += gj;
                            gx_mean += gj * xhat;
                        }
                        g_mean /= bf;
                        gx_mean /= bf;
                        for r in 0..b {
                            let xhat = (xv.at2(r, j) - mu) * inv_std;
                            d[r * f + j] = inv_std * (g.at2(r, j) - g_mean - xhat * gx_mean);
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(&[b, f], d)?);
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let scale = g.item() / labels.len() as f64;
                    let (b, c) = (probs.shape()[0], probs.shape()[1]);
                    let mut d = probs.data().to_vec();
                    for (r, &label) in labels.iter().enumerate() {
                        d[r * c + label] -= 1.0;
                    }
                    for v in &mut d {
                        *v *= scale;
                    }
                    acc(&mut grads, *logits, Tensor::new(&[b, c], d)?);
                }
            }
        }
        Ok(())
    }

    fn map(&self, a: ValueId, f: impl Fn(f64) -> f64) -> Tensor {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        Tensor::new(src.shape(), data).expect("shape preserved by map")
    }

    fn binary_forward(
        &self,
        op: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(av.shape(), data)
        } else if bv.is_scalar() {
            let s = bv.item();
            let data = av.data().iter().map(|&x| f(x, s)).collect();
            Tensor::new(av.shape(), data)
        } else if av.is_scalar() {
            let s = av.item();
            let data = bv.data().iter().map(|&y| f(s, y)).collect();
            Tensor::new(bv.shape(), data)
        } else {
            Err(Error::dim(op, av.shape(), bv.shape()))
        }
    }
}

/// Accumulate `delta` into the gradient slot for `id`.
fn acc(grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(g) => {
            for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                *gv += dv;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Reduce an upstream gradient to the shape of `operand`: identity when
/// shapes match, total sum when the operand was a broadcast scalar.
fn fit(g: &Tensor, operand: &Tensor) -> Tensor {
    if g.shape() == operand.shape() {
        g.clone()
    } else {
        debug_assert!(operand.is_scalar());
        let total: f64 = g.data().iter().sum();
        Tensor::new(operand.shape(), vec![total]).expect("scalar fit")
    }
}

/// `g` times `other`, where `other` may be a broadcast scalar.
fn hadamard_bc(g: &Tensor, other: &Tensor) -> Tensor {
    let mut out = g.clone();
    if other.is_scalar() && g.len() != 1 {
        let s = other.item();
        for v in out.data_mut() {
            *v *= s;
        }
    } else {
        for (v, &o) in out.data_mut().iter_mut().zip(other.data()) {
            *v *= o;
        }
    }
    out
}

fn row_view(t: &Tensor) -> Result<(usize, usize)> {
    match t.rank() {
        1 => Ok((1, t.len())),
        2 => Ok((t.shape()[0], t.shape()[1])),
        _ => Err(Error::dim("softmax", t.shape(), &[])),
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_difference_reports, rel_err};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_and_sigmoid_definitions() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn tanh_backward_matches_finite_difference() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::scalar(0.3)).unwrap();

        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.tanh(x);
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();

        let slot = store.slot("x").unwrap();
        let analytic = 1.0 - 0.3f64.tanh().powi(2);
        assert!(rel_err(store.grad(slot).item(), analytic, 1e-12) < 1e-12);

        let h = 1e-6_f64;
        let fd = ((0.3_f64 + h).tanh() - (0.3_f64 - h).tanh()) / (2.0 * h);
        assert!(rel_err(store.grad(slot).item(), fd, 1e-12) < 1e-8);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let single = tape.constant(Tensor::new(&[1], vec![-4.2]).unwrap());
        let s = tape.softmax(single).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0]);

        let pair = tape.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let s = tape.softmax(pair).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let big = tape.constant(Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap());
        let s = tape.softmax(big).unwrap();
        let out = tape.value(s);
        assert!(out.all_finite());
        assert!((out.data()[0] - 0.5).abs() < 1e-12);
        assert!((out.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_permute() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals = Tensor::uniform(&[4, 5], 3.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(vals.clone());
        let s = tape.softmax(x).unwrap();
        let out = tape.value(s).clone();
        for r in 0..4 {
            let total: f64 = out.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }

        // Permutation equivariance on one row: reverse the inputs,
        // the outputs reverse too.
        let row: Vec<f64> = vals.row(0).to_vec();
        let rev: Vec<f64> = row.iter().rev().cloned().collect();
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[5], row).unwrap());
        let b = tape.constant(Tensor::new(&[5], rev).unwrap());
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        let fa = tape.value(sa).data().to_vec();
        let fb: Vec<f64> = tape.value(sb).data().iter().rev().cloned().collect();
        for (x, y) in fa.iter().zip(&fb) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_of_sum_linear_broadcasts_input() {
        // loss = sum(W . x) with x fixed: dW has x^T in every row.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        store
            .register("W", Tensor::uniform(&[3, 4], 1.0, &mut rng))
            .unwrap();
        let xv = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();

        let mut tape = Tape::new();
        let w = tape.param(&store, "W").unwrap();
        let x = tape.constant(xv.clone());
        let prod = tape.matmul(w, x).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss, &mut store).unwrap();

        let grad = store.grad(store.slot("W").unwrap());
        for r in 0..3 {
            assert_eq!(grad.row(r), xv.data());
        }
    }

    #[test]
    fn backward_product_rule_at_zero() {
        // loss = sigmoid(w) * w at w = 0 has gradient sigma(0) = 0.5.
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let s = tape.sigmoid(w);
        let loss = tape.mul(s, w).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let g = store.grad(store.slot("w").unwrap()).item();
        assert!((g - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let err = tape.backward(x, &mut store).unwrap_err();
        assert!(matches!(err, crate::error::Error::Contract(_)));
    }

    #[test]
    fn batch_norm_zero_variance_rows() {
        // Identical rows: variance is clamped by eps, output is all zero.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3, 2], vec![5.0, -1.0, 5.0, -1.0, 5.0, -1.0]).unwrap());
        let (y, stats) = tape.batch_norm_train(x, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
        assert_eq!(stats.mean.data(), &[5.0, -1.0]);
        assert_eq!(stats.var.data(), &[0.0, 0.0]);
    }

    #[test]
    fn batch_norm_unit_variance_by_construction() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 1], vec![-1.0, 1.0]).unwrap());
        let (y, _) = tape.batch_norm_train(x, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn batch_norm_normalizes_random_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Tensor::uniform(&[8, 5], 2.0, &mut rng);
        // Spread feature scales; variances stay well above eps so the
        // normalized variance lands within 1e-6 of 1.
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = *v * 10.0 * ((i % 5) as f64 + 1.0) + (i % 5) as f64;
        }
        let mut tape = Tape::new();
        let xid = tape.constant(x);
        let (y, _) = tape.batch_norm_train(xid, 1e-5).unwrap();
        let out = tape.value(y);
        for j in 0..5 {
            let col: Vec<f64> = (0..8).map(|r| out.at2(r, j)).collect();
            let mean: f64 = col.iter().sum::<f64>() / 8.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10, "feature {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "feature {j} var {var}");
        }
    }

    #[test]
    fn batch_norm_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let err = tape.batch_norm_train(x, 1e-5).unwrap_err();
        assert!(matches!(err, crate::error::Error::Contract(_)));
    }

    #[test]
    fn elementwise_dispatch_and_arity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2], vec![3.0, 5.0]).unwrap());
        let sum = tape.elementwise(ElementwiseOp::Add, &[a, b]).unwrap();
        assert_eq!(tape.value(sum).data(), &[4.0, 3.0]);
        let m0 = tape.elementwise(ElementwiseOp::Max0, &[a]).unwrap();
        assert_eq!(tape.value(m0).data(), &[1.0, 0.0]);
        assert!(tape.elementwise(ElementwiseOp::Mul, &[a]).is_err());

        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.elementwise(ElementwiseOp::Add, &[a, c]).is_err());
    }

    #[test]
    fn replaying_a_forward_graph_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[2, 4], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone());
            let wi = tape.constant(w.clone());
            let lin = tape.linear(xi, wi).unwrap();
            let act = tape.tanh(lin);
            let sm = tape.softmax(act).unwrap();
            tape.value(sm).clone()
        };
        assert_eq!(run(), run());
    }

    /// Builds a deterministic random graph from a plan of op picks and
    /// returns the scalar loss node. Used for the gradient-soundness
    /// property below.
    fn build_plan_graph(
        tape: &mut Tape,
        store: &ParamStore,
        plan: &[u8],
    ) -> crate::error::Result<ValueId> {
        let a = tape.param(store, "a")?; // [2,3]
        let b = tape.param(store, "b")?; // [3,2]
        let v = tape.param(store, "v")?; // [3]
        let mut cur = tape.matmul(a, b)?; // [2,2]
        let mut held = tape.linear(cur, cur)?; // [2,2]
        for &pick in plan {
            match pick % 8 {
                0 => cur = tape.sigmoid(cur),
                1 => cur = tape.tanh(cur),
                2 => cur = tape.add(cur, held)?,
                3 => cur = tape.mul(cur, held)?,
                4 => {
                    cur = tape.sub(cur, held)?;
                    held = tape.tanh(cur);
                }
                5 => cur = tape.softmax(cur)?,
                6 => {
                    let (bn, _) = tape.batch_norm_train(cur, 1e-5)?;
                    cur = bn;
                }
                _ => {
                    let col = tape.slice_col(cur, 0)?;
                    let wide = tape.broadcast_col(col, 2)?;
                    cur = tape.add(cur, wide)?;
                }
            }
        }
        let row = tape.broadcast_row(v, 2)?; // [2,3]
        let back = tape.matmul(cur, a)?; // [2,3]
        let mixed = tape.mul(back, row)?;
        Ok(tape.sum(mixed))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn autodiff_matches_finite_differences_on_random_graphs(
            seed in 0u64..1000,
            plan in proptest::collection::vec(0u8..8, 1..6),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            store.register("a", Tensor::uniform(&[2, 3], 0.8, &mut rng)).unwrap();
            store.register("b", Tensor::uniform(&[3, 2], 0.8, &mut rng)).unwrap();
            store.register("v", Tensor::uniform(&[3], 0.8, &mut rng)).unwrap();

            let mut tape = Tape::new();
            let loss = build_plan_graph(&mut tape, &store, &plan).unwrap();
            prop_assume!(tape.value(loss).all_finite());
            store.zero_grads();
            tape.backward(loss, &mut store).unwrap();

            let mut loss_fn = |s: &ParamStore| {
                let mut t = Tape::new();
                let l = build_plan_graph(&mut t, s, &plan)?;
                Ok(t.value(l).item())
            };
            let reports = finite_difference_reports(&mut store, &mut loss_fn, 1e-5).unwrap();
            for r in &reports {
                prop_assert!(
                    r.worst_rel_err < 1e-4,
                    "param {} rel err {} (ad {} vs fd {})",
                    r.name, r.worst_rel_err, r.autodiff, r.finite_diff
                );
            }
        }
    }
}
