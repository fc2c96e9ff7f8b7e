//! Dynamic reverse-mode autodiff graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so node indices are already a topological order and the
//! backward sweep walks them once, from the loss down.

use super::kernels::{self, Conv1dGeom};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, S),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    WeightedSum { weights: Var, inputs: Vec<Var> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanPoolRows { input: Var, factor: usize },
    Conv1d { input: Var, weight: Var, bias: Var, geom: Conv1dGeom },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    L1(Var, Var),
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked)
    }

    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, x: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let value = self.value(x).map(f);
        let tracked = self.is_tracked(x);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// Adds the vector `bias` to every row of matrix `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row(self.value(bias))?;
        let tracked = self.any_tracked(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), tracked))
    }

    /// `x * w + b` for a matrix `x` and optional row bias.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), S::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(S::zero()))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.detached();
        let c = xv.cols();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let tracked = self.is_tracked(x);
        self.push(value, Op::Softmax(x), tracked)
    }

    /// `sum_k weights[k] * inputs[k]` for a rank-1 `weights` of length `inputs.len()`.
    pub fn weighted_sum(&mut self, weights: Var, inputs: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        if w.rank() != 1 || w.numel() != inputs.len() {
            return dim_err(format!(
                "{} weights for {} inputs",
                w.numel(),
                inputs.len()
            ));
        }
        let Some(&first) = inputs.first() else {
            return dim_err("weighted sum of no inputs");
        };
        let shape = self.shape(first).to_vec();
        let mut out = Tensor::zeros(&shape);
        for (k, &x) in inputs.iter().enumerate() {
            let xv = self.value(x);
            if xv.shape() != shape.as_slice() {
                return dim_err(format!(
                    "weighted sum input {k} has shape {:?}, expected {shape:?}",
                    xv.shape()
                ));
            }
            let wk = w.data()[k];
            for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
                *o += wk * v;
            }
        }
        let mut deps = inputs.to_vec();
        deps.push(weights);
        let tracked = self.any_tracked(&deps);
        Ok(self.push(out, Op::WeightedSum { weights, inputs: inputs.to_vec() }, tracked))
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of no inputs");
        };
        let rows = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != rows {
                return dim_err(format!(
                    "ragged concat: {:?} against {rows} rows",
                    v.shape()
                ));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let tracked = self.any_tracked(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Stacks matrices with equal widths along the frame axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_rows(&refs)?;
        let tracked = self.any_tracked(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Mean-pools consecutive groups of `factor` rows and keeps the first
    /// `rows` groups; trailing input rows beyond `rows * factor` are dropped.
    pub fn mean_pool_rows(&mut self, x: Var, factor: usize, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if factor == 0 || rows == 0 || xv.rank() != 2 || rows * factor > xv.rows() {
            return dim_err(format!(
                "cannot pool {:?} by {factor} into {rows} rows",
                xv.shape()
            ));
        }
        let c = xv.cols();
        let inv = S::one() / S::of_usize(factor);
        let mut data = vec![S::zero(); rows * c];
        for (r, orow) in data.chunks_mut(c).enumerate() {
            for k in 0..factor {
                for (o, &v) in orow.iter_mut().zip(xv.row(r * factor + k)) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let tracked = self.is_tracked(x);
        Ok(self.push(value, Op::MeanPoolRows { input: x, factor }, tracked))
    }

    /// Width-`weight.rows() / in_ch` 1-D convolution over frames with
    /// edge-replicated padding; see [`Conv1dGeom`].
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var, width: usize, stride: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(weight), self.value(bias));
        if xv.rank() != 2 || wv.rank() != 2 || width == 0 || stride == 0 {
            return dim_err("conv1d needs matrix input and weight");
        }
        let geom = Conv1dGeom {
            frames: xv.rows(),
            in_ch: xv.cols(),
            out_ch: wv.cols(),
            width,
            stride,
        };
        if wv.rows() != width * geom.in_ch || bv.numel() != geom.out_ch {
            return dim_err(format!(
                "conv1d weight {:?} / bias {:?} do not fit input {:?} at width {width}",
                wv.shape(),
                bv.shape(),
                xv.shape()
            ));
        }
        let mut out = vec![S::zero(); geom.out_frames() * geom.out_ch];
        kernels::conv1d(geom, xv.data(), wv.data(), bv.data(), &mut out);
        let value = Tensor::new(vec![geom.out_frames(), geom.out_ch], out)?;
        let tracked = self.any_tracked(&[x, weight, bias]);
        Ok(self.push(value, Op::Conv1d { input: x, weight, bias, geom }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.is_tracked(x);
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / S::of_usize(xv.numel()));
        let tracked = self.is_tracked(x);
        self.push(value, Op::Mean(x), tracked)
    }

    /// Mean softmax cross-entropy of `[frames x classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.rows() != labels.len() {
            return dim_err(format!(
                "{} labels for logits {:?}",
                labels.len(),
                lv.shape()
            ));
        }
        let v = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= v) {
            return Err(Error::Data(format!("label {bad} out of range for {v} classes")));
        }
        let mut probs = lv.data().to_vec();
        let mut total = S::zero();
        for (row, &y) in probs.chunks_mut(v).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<S>().ln();
            total += lse - row[y];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / S::of_usize(labels.len()));
        let tracked = self.is_tracked(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            tracked,
        ))
    }

    /// Mean absolute error. The subgradient at a zero residual is 0.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.value(a).sub(self.value(b))?;
        let value = Tensor::scalar(diff.data().iter().map(|d| d.abs()).sum::<S>() / S::of_usize(diff.numel()));
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(value, Op::L1(a, b), tracked))
    }

    /// Populates `grad` on every tracked ancestor of `loss`.
    ///
    /// Untracked nodes and nodes that do not feed `loss` keep no gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; n];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[i].value.set_grad(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q, s) = (av.rows(), av.cols(), bv.cols());
                if let Some(da) = slot(nodes, grads, *a) {
                    kernels::matmul_nt_acc(g, bv.data(), da, p, q, s);
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    kernels::matmul_tn_acc(av.data(), g, db, p, q, s);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = slot(nodes, grads, v) {
                        axpy(d, g, S::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = slot(nodes, grads, *a) {
                    axpy(d, g, S::one());
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    axpy(d, g, -S::one());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if let Some(d) = slot(nodes, grads, *a) {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    axpy(d, g, S::one());
                }
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in g.chunks(db.len()) {
                        axpy(db, row, S::one());
                    }
                }
            }
            Op::Scale(x, k) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    axpy(d, g, *k);
                }
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                if let Some(d) = slot(nodes, grads, *x) {
                    for ((d, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
                        *d += gv * (S::one() - yv * yv);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                if let Some(d) = slot(nodes, grads, *x) {
                    for ((d, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > S::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &nodes[i].value;
                let c = y.cols();
                if let Some(d) = slot(nodes, grads, *x) {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((dv, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::WeightedSum { weights, inputs } => {
                let w = val(*weights).data().to_vec();
                for (k, &x) in inputs.iter().enumerate() {
                    if let Some(d) = slot(nodes, grads, x) {
                        axpy(d, g, w[k]);
                    }
                }
                if let Some(dw) = slot(nodes, grads, *weights) {
                    for (k, &x) in inputs.iter().enumerate() {
                        dw[k] += g.iter().zip(val(x).data()).map(|(&a, &b)| a * b).sum::<S>();
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(d) = slot(nodes, grads, p) {
                        for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                            axpy(drow, &grow[offset..offset + w], S::one());
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if let Some(d) = slot(nodes, grads, p) {
                        axpy(d, &g[offset..offset + len], S::one());
                    }
                    offset += len;
                }
            }
            Op::MeanPoolRows { input, factor } => {
                let c = val(*input).cols();
                let inv = S::one() / S::of_usize(*factor);
                if let Some(d) = slot(nodes, grads, *input) {
                    for (r, grow) in g.chunks(c).enumerate() {
                        for k in 0..*factor {
                            let start = (r * factor + k) * c;
                            axpy(&mut d[start..start + c], grow, inv);
                        }
                    }
                }
            }
            Op::Conv1d { input, weight, bias, geom } => {
                let (xv, wv) = (val(*input).data(), val(*weight).data());
                // Borrow the three slots one at a time.
                if let Some(dx) = slot(nodes, grads, *input) {
                    kernels::conv1d_backward(*geom, xv, wv, g, Some(dx), None, None);
                }
                if let Some(dw) = slot(nodes, grads, *weight) {
                    kernels::conv1d_backward(*geom, xv, wv, g, None, Some(dw), None);
                }
                if let Some(db) = slot(nodes, grads, *bias) {
                    kernels::conv1d_backward(*geom, xv, wv, g, None, None, Some(db));
                }
            }
            Op::Sum(x) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    d.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(d) = slot(nodes, grads, *x) {
                    let k = g[0] / S::of_usize(d.len());
                    d.iter_mut().for_each(|v| *v += k);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(d) = slot(nodes, grads, *logits) {
                    let v = probs.len() / labels.len();
                    let k = g[0] / S::of_usize(labels.len());
                    for ((drow, prow), &y) in d.chunks_mut(v).zip(probs.chunks(v)).zip(labels) {
                        for (j, (dv, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let target = if j == y { S::one() } else { S::zero() };
                            *dv += k * (p - target);
                        }
                    }
                }
            }
            Op::L1(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let k = g[0] / S::of_usize(av.len());
                let sign: Vec<S> = av
                    .iter()
                    .zip(bv)
                    .map(|(&x, &y)| {
                        let r = x - y;
                        if r > S::zero() {
                            k
                        } else if r < S::zero() {
                            -k
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                if let Some(d) = slot(nodes, grads, *a) {
                    axpy(d, &sign, S::one());
                }
                if let Some(d) = slot(nodes, grads, *b) {
                    axpy(d, &sign, -S::one());
                }
            }
        }
    }
}

fn slot<'a, S: Scalar>(
    nodes: &[Node<S>],
    grads: &'a mut [Option<Vec<S>>],
    v: Var,
) -> Option<&'a mut Vec<S>> {
    if !nodes[v.0].tracked {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.numel()]))
}

fn axpy<S: Scalar>(dst: &mut [S], src: &[S], k: S) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Softmax of a plain slice, outside any graph.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}
