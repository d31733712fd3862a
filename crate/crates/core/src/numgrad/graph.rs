//! Eager reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is built fresh for every evaluation. Each primitive computes
//! its value immediately and records its parents; [`Graph::backward`] then
//! walks the nodes in reverse creation order, which is a valid reverse
//! topological order because parents always precede children.
//!
//! Leaves come in two flavours: [`Graph::param`] (receives a gradient) and
//! [`Graph::constant`] (never does). Nodes whose ancestry contains no param
//! are skipped during the reverse sweep.

use crate::error::{Error, Result};
use crate::numgrad::Matrix;

/// Rows with norm below this are mapped to zero by `l2_normalize_rows`.
pub const L2_EPS: f64 = 1e-12;

/// Variance epsilon used by `layer_norm_rows`.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis. `Rows` collapses the row dimension (result is `1 x C`),
/// `Cols` collapses the column dimension (result is `R x 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SumAll(NodeId),
    SumAxis(NodeId, Axis),
    MaxAxis(NodeId, Axis, Vec<usize>),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    L2NormalizeRows(NodeId, Vec<f64>),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Matrix,
        inv_std: Vec<f64>,
    },
    MaskMul(NodeId, Matrix),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::SumAll(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MaxAxis(..) => "max_axis",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::MaskMul(..) => "mask_mul",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::MaxAxis(a, _, _)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::L2NormalizeRows(a, _)
            | Op::MaskMul(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNormRows { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros when `id` does not
    /// lie on a path to the loss.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Name of the primitive that produced `id`.
    pub fn primitive(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant copy of `id`'s current value, cut off from the graph.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    fn check_same(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va, vb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Offset(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(bad) = va.as_slice().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("nonpositive entry {bad}"),
            });
        }
        let v = va.map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let va = self.value(a);
        let (r, c) = va.shape();
        let v = match axis {
            Axis::Rows => {
                let mut out = Matrix::zeros(1, c);
                for row in va.iter_rows() {
                    for (o, x) in out.as_mut_slice().iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out
            }
            Axis::Cols => Matrix::from_fn(r, 1, |i, _| va.row(i).iter().sum()),
        };
        self.push(v, Op::SumAxis(a, axis))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let (r, c) = self.shape(a);
        let n = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        } as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    /// Max along `axis`. Gradient flows only to the arg-max entry; ties go
    /// to the lowest index.
    pub fn max_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let va = self.value(a);
        let (r, c) = va.shape();
        let (v, arg) = match axis {
            Axis::Cols => {
                let mut arg = Vec::with_capacity(r);
                let mut out = Matrix::zeros(r, 1);
                for i in 0..r {
                    let (j, m) = argmax(va.row(i));
                    arg.push(j);
                    out[(i, 0)] = m;
                }
                (out, arg)
            }
            Axis::Rows => {
                let mut arg = vec![0usize; c];
                let mut out = Matrix::zeros(1, c);
                for j in 0..c {
                    let mut best = va[(0, j)];
                    for i in 1..r {
                        if va[(i, j)] > best {
                            best = va[(i, j)];
                            arg[j] = i;
                        }
                    }
                    out[(0, j)] = best;
                }
                (out, arg)
            }
        };
        self.push(v, Op::MaxAxis(a, axis, arg))
    }

    /// Max over all entries, ties to the lowest flattened index.
    pub fn max_all(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let flat = if r == 1 {
            a
        } else {
            self.reshape(a, 1, r * c).expect("same element count")
        };
        self.max_axis(flat, Axis::Cols)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = va.clone();
        for i in 0..va.rows() {
            let row = out.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Scales each row to unit L2 norm. Rows with norm below [`L2_EPS`] map
    /// to zero and pass no gradient.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = va.clone();
        let mut norms = Vec::with_capacity(va.rows());
        for i in 0..va.rows() {
            let row = out.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(n);
            if n < L2_EPS {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        self.push(out, Op::L2NormalizeRows(a, norms))
    }

    /// Per-row layer norm with learned `1 x C` gain and bias.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, c) {
                return Err(shape_err("layer_norm_rows", self.value(x), self.value(p)));
            }
        }
        let vx = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut normalized = Matrix::zeros(r, c);
        let mut out = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = vx.row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mu) * is;
                normalized[(i, j)] = h;
                out[(i, j)] = h * g[(0, j)] + b[(0, j)];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Elementwise product with a constant mask.
    pub fn mask_mul(&mut self, a: NodeId, mask: Matrix) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape() != mask.shape() {
            return Err(shape_err("mask_mul", va, &mask));
        }
        let v = va.zip_map(&mask, |x, m| x * m);
        Ok(self.push(v, Op::MaskMul(a, mask)))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows index {bad} out of range for {} rows",
                va.rows()
            )));
        }
        let mut out = Matrix::zeros(indices.len(), va.cols());
        for (k, &i) in indices.iter().enumerate() {
            out.row_mut(k).copy_from_slice(va.row(i));
        }
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of zero parts".into()))?;
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(shape_err("concat_rows", self.value(first), vp));
            }
            rows += vp.rows();
            data.extend_from_slice(vp.as_slice());
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: va.shape(),
                right: (rows, cols),
            });
        }
        let v = Matrix::from_vec(rows, cols, va.as_slice().to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Repeats a `1 x C` row `n` times, as a product with a constant column
    /// of ones.
    pub fn repeat_row(&mut self, row: NodeId, n: usize) -> Result<NodeId> {
        let ones = self.constant(Matrix::ones(n, 1));
        self.matmul(ones, row)
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let n = self.shape(a).0;
        let rep = self.repeat_row(row, n)?;
        self.add(a, rep)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, up: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let mut acc = |id: NodeId, g: Matrix| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    acc(*a, up.matmul(&val(*b).transpose()).expect("matmul grad"));
                }
                if self.nodes[b.0].requires_grad {
                    acc(*b, val(*a).transpose().matmul(up).expect("matmul grad"));
                }
            }
            Op::Transpose(a) => acc(*a, up.transpose()),
            Op::Add(a, b) => {
                acc(*a, up.clone());
                acc(*b, up.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, up.clone());
                acc(*b, up.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, up.zip_map(val(*b), |g, y| g * y));
                acc(*b, up.zip_map(val(*a), |g, x| g * x));
            }
            Op::Scale(a, c) => acc(*a, up.map(|g| g * c)),
            Op::Offset(a) => acc(*a, up.clone()),
            Op::Exp(a) => acc(*a, up.zip_map(&node.value, |g, y| g * y)),
            Op::Log(a) => acc(*a, up.zip_map(val(*a), |g, x| g / x)),
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, up.item()));
            }
            Op::SumAxis(a, axis) => {
                let (r, c) = val(*a).shape();
                let g = match axis {
                    Axis::Rows => Matrix::from_fn(r, c, |_, j| up[(0, j)]),
                    Axis::Cols => Matrix::from_fn(r, c, |i, _| up[(i, 0)]),
                };
                acc(*a, g);
            }
            Op::MaxAxis(a, axis, arg) => {
                let (r, c) = val(*a).shape();
                let mut g = Matrix::zeros(r, c);
                match axis {
                    Axis::Cols => {
                        for (i, &j) in arg.iter().enumerate() {
                            g[(i, j)] = up[(i, 0)];
                        }
                    }
                    Axis::Rows => {
                        for (j, &i) in arg.iter().enumerate() {
                            g[(i, j)] = up[(0, j)];
                        }
                    }
                }
                acc(*a, g);
            }
            Op::Relu(a) => acc(
                *a,
                up.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::SoftmaxRows(a) => {
                let s = &node.value;
                let mut g = Matrix::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let (sr, ur) = (s.row(i), up.row(i));
                    let dot: f64 = sr.iter().zip(ur).map(|(p, u)| p * u).sum();
                    for (o, (p, u)) in g.row_mut(i).iter_mut().zip(sr.iter().zip(ur)) {
                        *o = p * (u - dot);
                    }
                }
                acc(*a, g);
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    if norms[i] < L2_EPS {
                        continue;
                    }
                    let (yr, ur) = (y.row(i), up.row(i));
                    let dot: f64 = yr.iter().zip(ur).map(|(p, u)| p * u).sum();
                    for (o, (p, u)) in g.row_mut(i).iter_mut().zip(yr.iter().zip(ur)) {
                        *o = (u - p * dot) / norms[i];
                    }
                }
                acc(*a, g);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (r, c) = normalized.shape();
                let gv = val(*gain);
                let mut dgain = Matrix::zeros(1, c);
                let mut dbias = Matrix::zeros(1, c);
                let mut dx = Matrix::zeros(r, c);
                for i in 0..r {
                    let (h, u) = (normalized.row(i), up.row(i));
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        dgain[(0, j)] += u[j] * h[j];
                        dbias[(0, j)] += u[j];
                        let dh = u[j] * gv[(0, j)];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = u[j] * gv[(0, j)];
                        dx[(i, j)] = inv_std[i] * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::MaskMul(a, m) => acc(*a, up.zip_map(m, |g, w| g * w)),
            Op::GatherRows(a, indices) => {
                let (r, c) = val(*a).shape();
                let mut g = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, u) in g.row_mut(i).iter_mut().zip(up.row(k)) {
                        *o += u;
                    }
                }
                acc(*a, g);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let slice = up.as_slice()[start * c..(start + r) * c].to_vec();
                    start += r;
                    acc(p, Matrix::from_vec(r, c, slice).expect("concat grad"));
                }
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                acc(
                    *a,
                    Matrix::from_vec(r, c, up.as_slice().to_vec()).expect("reshape grad"),
                );
            }
        }
    }
}

/// Index and value of the maximum, first occurrence on ties.
pub(crate) fn argmax(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_records_one_primitive() {
        let mut g = Graph::new();
        let a = g.param(Matrix::ones(2, 3));
        let b = g.param(Matrix::ones(3, 2));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), (2, 2));
        assert_eq!(g.primitive(c), "matmul");
        assert_eq!(g.parents(c), vec![a, b]);
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.param(Matrix::ones(2, 3));
        let err = g.matmul(a, a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let a = g.param(Matrix::from_rows(&[[3.0, 4.0]]));
        let n = g.l2_normalize_rows(a);
        assert_eq!(g.value(n).as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_zero_row_is_zero_with_zero_grad() {
        let mut g = Graph::new();
        let a = g.param(Matrix::from_rows(&[[0.0, 0.0], [1e-13, 0.0], [1.0, 1.0]]));
        let n = g.l2_normalize_rows(a);
        assert_eq!(g.value(n).row(0), &[0.0, 0.0]);
        assert_eq!(g.value(n).row(1), &[0.0, 0.0]);
        let s = g.sum(n);
        let grads = g.backward(s).unwrap();
        let ga = grads.wrt(a);
        assert_eq!(ga.row(0), &[0.0, 0.0]);
        assert_eq!(ga.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn exp_of_zero_is_ones() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 3));
        let e = g.exp(a);
        assert_eq!(g.value(e), &Matrix::ones(2, 3));
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::from_rows(&[[1.0, 0.0]]));
        assert!(matches!(g.log(a), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x), Matrix::ones(3, 4));
    }

    #[test]
    fn dot_grad_is_twice_x() {
        let mut g = Graph::new();
        let xv = Matrix::from_rows(&[[1.5, -2.0, 0.25]]);
        let x = g.param(xv.clone());
        let xt = g.transpose(x);
        let d = g.matmul(x, xt).unwrap();
        let grads = g.backward(d).unwrap();
        assert_eq!(grads.wrt(x), xv.map(|v| 2.0 * v));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Matrix::scalar(0.7));
        let y = g.add(x, x).unwrap();
        let y = g.add(y, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 3.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Matrix::ones(2, 2));
        assert!(matches!(
            g.backward(x),
            Err(Error::NonScalarLoss { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Matrix::ones(2, 2));
        let unused = g.param(Matrix::ones(3, 1));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(unused), Matrix::zeros(3, 1));
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.param(Matrix::from_rows(&[[2.0, 5.0, 5.0], [1.0, 1.0, 0.0]]));
        let m = g.max_axis(x, Axis::Cols);
        assert_eq!(g.value(m).as_slice(), &[5.0, 1.0]);
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.wrt(x),
            Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
        );

        let mut g = Graph::new();
        let x = g.param(Matrix::from_rows(&[[3.0, 3.0], [3.0, 3.0]]));
        let m = g.max_all(x);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.wrt(x), Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]));
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(Matrix::ones(1, 2));
        let x = g.param(Matrix::ones(1, 2));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(x), Matrix::ones(1, 2));
    }
}
