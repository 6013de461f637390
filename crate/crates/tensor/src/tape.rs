//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its value and the indices
//! of its inputs. [`Tape::backward`] walks the list once in reverse, so each
//! node is visited exactly once and only nodes downstream of a leaf that
//! requires a gradient do any work.

use std::sync::Arc;

use crate::tensor::{gemm, Tensor};
use crate::TensorError;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterSum(Var, Arc<[usize]>),
    MseLoss(Var, Var),
    L1Loss(Var, Var),
    SquaredL2(Var),
    /// Additive noise drawn outside the tape; identity gradient. Marks the
    /// tape as non-replayable.
    Noise(Var),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Concat(..) => "concat",
            Op::SliceCols(..) => "slice",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterSum(..) => "scatter_sum",
            Op::MseLoss(..) => "mse_loss",
            Op::L1Loss(..) => "l1_loss",
            Op::SquaredL2(..) => "squared_l2_norm",
            Op::Noise(..) => "noise",
        }
    }

    pub(crate) fn is_deterministic(&self) -> bool {
        !matches!(self, Op::Noise(..))
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    pub(crate) trainable: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    first_nonfinite: Option<usize>,
    stored_floats: usize,
}

/// How a right operand is broadcast against a left operand of shape `r×c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(op: &str, lhs: (usize, usize), rhs: (usize, usize)) -> Broadcast {
    if lhs == rhs {
        Broadcast::Same
    } else if rhs == (1, 1) {
        Broadcast::Scalar
    } else if rhs == (1, lhs.1) {
        Broadcast::Row
    } else if rhs == (lhs.0, 1) {
        Broadcast::Col
    } else {
        panic!("{op}: cannot broadcast {rhs:?} against {lhs:?}");
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (rows, cols) = a.shape();
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(ad.len());
    match kind {
        Broadcast::Same => out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y))),
        Broadcast::Scalar => out.extend(ad.iter().map(|&x| f(x, bd[0]))),
        Broadcast::Row => {
            for r in 0..rows {
                let row = &ad[r * cols..(r + 1) * cols];
                out.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
            }
        }
        Broadcast::Col => {
            for r in 0..rows {
                let y = bd[r];
                out.extend(ad[r * cols..(r + 1) * cols].iter().map(|&x| f(x, y)));
            }
        }
    }
    Tensor::new(rows, cols, out)
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn reduce_to(g: &Tensor, kind: Broadcast, target: (usize, usize)) -> Tensor {
    let (rows, cols) = g.shape();
    match kind {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::scalar(g.sum()),
        Broadcast::Row => {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for (o, v) in out.iter_mut().zip(g.row_slice(r)) {
                    *o += v;
                }
            }
            Tensor::new(target.0, target.1, out)
        }
        Broadcast::Col => {
            let out = (0..rows).map(|r| g.row_slice(r).iter().sum()).collect();
            Tensor::new(target.0, target.1, out)
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Total number of floats held by recorded values.
    pub fn stored_floats(&self) -> usize {
        self.stored_floats
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Index of the first op whose output contained NaN or ±∞, if any.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.first_nonfinite
    }

    /// `Err` if any recorded forward value is non-finite.
    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.first_nonfinite {
            None => Ok(()),
            Some(index) => Err(TensorError::NonFinite {
                index,
                op: self.nodes[index].op.name(),
            }),
        }
    }

    /// Index of the first op that cannot be replayed bit-identically.
    pub fn first_nondeterministic(&self) -> Option<usize> {
        self.nodes.iter().position(|n| !n.op.is_deterministic())
    }

    /// Name of the op at `index`.
    pub fn op_name(&self, index: usize) -> &'static str {
        self.nodes[index].op.name()
    }

    /// Input values of every recorded relu.
    pub fn relu_inputs(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Relu(x) => Some(&self.nodes[x.0].value),
            _ => None,
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, trainable: bool) -> Var {
        let index = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.all_finite() {
            self.first_nonfinite = Some(index);
        }
        self.stored_floats += value.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable,
        });
        Var(index)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg, false)
    }

    /// Leaf whose gradient is reported by [`Tape::backward`] when `trainable`.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable, trainable)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// `a + b`, with `b` broadcast as a row, column, or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let kind = broadcast_kind("add", self.shape(a), self.shape(b));
        let value = broadcast_binary(self.value(a), self.value(b), kind, |x, y| x + y);
        self.push_op(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let kind = broadcast_kind("sub", self.shape(a), self.shape(b));
        let value = broadcast_binary(self.value(a), self.value(b), kind, |x, y| x - y);
        self.push_op(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product, with `b` broadcast as in [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let kind = broadcast_kind("mul", self.shape(a), self.shape(b));
        let value = broadcast_binary(self.value(a), self.value(b), kind, |x, y| x * y);
        self.push_op(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        self.push_op(value, Op::Scale(a, s), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push_op(value, Op::MatMul(a, b), &[a, b])
    }

    /// Concatenation along the last (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.shape(p);
                assert_eq!(r, rows, "concat: row count mismatch");
                c
            })
            .collect();
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        self.push_op(Tensor::new(rows, cols, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (rows, cols) = self.shape(a);
        assert!(start < end && end <= cols, "slice {start}..{end} of {cols} columns");
        let src = self.value(a);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src.row_slice(r)[start..end]);
        }
        self.push_op(Tensor::new(rows, end - start, data), Op::SliceCols(a, start), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push_op(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push_op(value, Op::Sigmoid(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sin);
        self.push_op(value, Op::Sin(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::cos);
        self.push_op(value, Op::Cos(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push_op(value, Op::Mean(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push_op(value, Op::Square(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push_op(value, Op::Sqrt(a), &[a])
    }

    /// Row `k` of the result is row `indices[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &Arc<[usize]>) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices.iter() {
            assert!(i < rows, "gather index {i} out of range for {rows} rows");
            data.extend_from_slice(src.row_slice(i));
        }
        let value = Tensor::new(indices.len(), cols, data);
        self.push_op(value, Op::GatherRows(a, Arc::clone(indices)), &[a])
    }

    /// Segment sum: row `indices[k]` of the result accumulates row `k` of
    /// `a`. Segments without entries are zero.
    pub fn scatter_sum(&mut self, a: Var, indices: &Arc<[usize]>, segments: usize) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.shape();
        assert_eq!(rows, indices.len(), "scatter_sum: one index per row required");
        let mut out = Tensor::zeros(segments, cols);
        let od = out.data_mut();
        for (k, &seg) in indices.iter().enumerate() {
            assert!(seg < segments, "scatter index {seg} out of range for {segments} segments");
            let dst = &mut od[seg * cols..(seg + 1) * cols];
            for (o, v) in dst.iter_mut().zip(src.row_slice(k)) {
                *o += v;
            }
        }
        self.push_op(out, Op::ScatterSum(a, Arc::clone(indices)), &[a])
    }

    /// Mean of squared differences over all entries.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.shape(), t.shape(), "mse_loss shape mismatch");
        let sse: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sse / p.len() as f64);
        self.push_op(value, Op::MseLoss(pred, target), &[pred, target])
    }

    /// Mean of absolute differences over all entries.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.shape(), t.shape(), "l1_loss shape mismatch");
        let sae: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum();
        let value = Tensor::scalar(sae / p.len() as f64);
        self.push_op(value, Op::L1Loss(pred, target), &[pred, target])
    }

    pub fn squared_l2_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.dot(t));
        self.push_op(value, Op::SquaredL2(a), &[a])
    }

    /// `a + noise` where the noise was sampled by the caller. The gradient is
    /// the identity, but a tape containing this op cannot be recomputed.
    pub fn add_noise(&mut self, a: Var, noise: Tensor) -> Var {
        let value = self.value(a).zip_map(&noise, |x, n| x + n);
        self.push_op(value, Op::Noise(a), &[a])
    }

    /// `relu(x·W + b)` or `x·W + b`, the building block of every MLP here.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.backward_seeded(vec![(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep with explicit initial adjoints. Seeds may target any
    /// node, including leaves, whose buffers then start from the seed and
    /// accumulate on top of it.
    pub fn backward_seeded(&self, seeds: Vec<(Var, Tensor)>) -> Result<Gradients, TensorError> {
        self.check_finite()?;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(v), "seed shape mismatch at node {}", v.0);
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }

        let mut leaf_grads = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()));
                leaf_grads.push((Var(i), g));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: Var,
        contribution: Tensor,
        at: usize,
    ) -> Result<(), TensorError> {
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        if !contribution.all_finite() {
            return Err(TensorError::NonFiniteAdjoint {
                index: at,
                op: self.nodes[at].op.name(),
            });
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), TensorError> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone(), i)?;
                }
                if self.wants(*b) {
                    let bs = self.shape(*b);
                    let kind = broadcast_kind("add", self.shape(*a), bs);
                    self.accumulate(grads, *b, reduce_to(g, kind, bs), i)?;
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone(), i)?;
                }
                if self.wants(*b) {
                    let bs = self.shape(*b);
                    let kind = broadcast_kind("sub", self.shape(*a), bs);
                    self.accumulate(grads, *b, reduce_to(g, kind, bs).scaled(-1.0), i)?;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind("mul", av.shape(), bv.shape());
                if self.wants(*a) {
                    let ga = broadcast_binary(g, bv, kind, |x, y| x * y);
                    self.accumulate(grads, *a, ga, i)?;
                }
                if self.wants(*b) {
                    let full = g.zip_map(av, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(&full, kind, bv.shape()), i)?;
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.scaled(s), i)?;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.wants(*a) {
                    // dA = G·Bᵀ
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), false);
                    self.accumulate(grads, *a, ga, i)?;
                }
                if self.wants(*b) {
                    // dB = Aᵀ·G
                    let mut gb = Tensor::zeros(k, n);
                    gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), false);
                    self.accumulate(grads, *b, gb, i)?;
                }
            }
            Op::Concat(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(rows, w, data), i)?;
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let w = g.cols();
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    ga.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, ga, i)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, ga, i)?;
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(out, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *a, ga, i)?;
            }
            Op::Sin(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * x.cos());
                self.accumulate(grads, *a, ga, i)?;
            }
            Op::Cos(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| -gv * x.sin());
                self.accumulate(grads, *a, ga, i)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()), i)?;
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let n = (r * c) as f64;
                self.accumulate(grads, *a, Tensor::full(r, c, g.item() / n), i)?;
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv);
                self.accumulate(grads, *a, ga, i)?;
            }
            Op::Sqrt(a) => {
                let ga = g.zip_map(out, |gv, y| gv / (2.0 * y));
                self.accumulate(grads, *a, ga, i)?;
            }
            Op::GatherRows(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                let gd = ga.data_mut();
                for (k, &src) in idx.iter().enumerate() {
                    for (o, v) in gd[src * cols..(src + 1) * cols].iter_mut().zip(g.row_slice(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga, i)?;
            }
            Op::ScatterSum(a, idx) => {
                let cols = g.cols();
                let mut data = Vec::with_capacity(idx.len() * cols);
                for &seg in idx.iter() {
                    data.extend_from_slice(g.row_slice(seg));
                }
                self.accumulate(grads, *a, Tensor::new(idx.len(), cols, data), i)?;
            }
            Op::MseLoss(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let scale = 2.0 * g.item() / pv.len() as f64;
                let diff = pv.zip_map(tv, |a, b| (a - b) * scale);
                if self.wants(*t) {
                    self.accumulate(grads, *t, diff.scaled(-1.0), i)?;
                }
                if self.wants(*p) {
                    self.accumulate(grads, *p, diff, i)?;
                }
            }
            Op::L1Loss(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let scale = g.item() / pv.len() as f64;
                let sign = pv.zip_map(tv, |a, b| {
                    let d = a - b;
                    if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                });
                if self.wants(*t) {
                    self.accumulate(grads, *t, sign.scaled(-1.0), i)?;
                }
                if self.wants(*p) {
                    self.accumulate(grads, *p, sign, i)?;
                }
            }
            Op::SquaredL2(a) => {
                let s = 2.0 * g.item();
                self.accumulate(grads, *a, self.value(*a).scaled(s), i)?;
            }
            Op::Noise(a) => {
                self.accumulate(grads, *a, g.clone(), i)?;
            }
        }
        Ok(())
    }
}

/// Adjoints of the leaves of one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(Var, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf. Trainable leaves always have one (zero if the
    /// loss does not depend on them).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads
            .binary_search_by_key(&v.0, |(var, _)| var.0)
            .ok()
            .map(|i| &self.grads[i].1)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads
            .binary_search_by_key(&v.0, |(var, _)| var.0)
            .ok()
            .map(|i| std::mem::replace(&mut self.grads[i].1, Tensor::zeros(0, 0)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(v, g)| (*v, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(v: &[usize]) -> Arc<[usize]> {
        Arc::from(v.to_vec())
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(3, 2, |r, c| (r as f64) - (c as f64) * 0.3));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::full(3, 2, 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss((2, 1)))));
    }

    #[test]
    fn non_participating_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::zeros(2, 3));
        let loss = tape.squared_l2_norm(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(2, 3));
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn nan_forward_is_reported_with_op_index() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 4.0]));
        let y = tape.sqrt(x);
        let loss = tape.sum(y);
        match tape.backward(loss) {
            Err(TensorError::NonFinite { index, op }) => {
                assert_eq!(index, y.index());
                assert_eq!(op, "sqrt");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn nan_adjoint_is_reported() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0, 4.0]));
        let y = tape.sqrt(x);
        let loss = tape.sum(y);
        assert!(matches!(
            tape.backward(loss),
            Err(TensorError::NonFiniteAdjoint { op: "sqrt", .. })
        ));
    }

    #[test]
    fn gather_scatter_degree_counts() {
        // y = scatter_sum(gather_rows(x, idx), idx): each entry of x is
        // counted once per occurrence in idx, so d(sum y)/dx = degree.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let ids = idx(&[0, 2, 2, 3, 2, 0]);
        let g = tape.gather_rows(x, &ids);
        let y = tape.scatter_sum(g, &ids, 4);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn scatter_leaves_empty_segments_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(2, 3, |r, c| (r * 3 + c) as f64 + 1.0));
        let y = tape.scatter_sum(x, &idx(&[2, 2]), 4);
        let v = tape.value(y);
        assert_eq!(v.row_slice(0), &[0.0, 0.0, 0.0]);
        assert_eq!(v.row_slice(2), &[5.0, 7.0, 9.0]);
        assert_eq!(v.row_slice(3), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_row_bias_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(4, 2, |r, c| (r + c) as f64));
        let b = tape.param(Tensor::row(vec![0.5, -0.5]));
        let y = tape.add(x, b);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(3.0));
        let c = tape.mul(a, b);
        assert!(!tape.requires_grad(c));
        let p = tape.param(Tensor::scalar(1.0));
        let d = tape.mul(c, p);
        assert!(tape.requires_grad(d));
    }

    #[test]
    fn hand_checked_losses() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![1.0, 3.0]));
        let t = tape.constant(Tensor::vector(vec![0.0, 1.0]));
        let mse = tape.mse_loss(p, t);
        let l1 = tape.l1_loss(p, t);
        assert_eq!(tape.value(mse).item(), 2.5);
        assert_eq!(tape.value(l1).item(), 1.5);
    }

    #[test]
    fn seeded_leaf_buffer_accumulates_on_top() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x);
        let g = tape
            .backward_seeded(vec![(y, Tensor::scalar(1.0)), (x, Tensor::scalar(10.0))])
            .unwrap();
        assert_eq!(g.get(x).unwrap().item(), 16.0);
    }
}
