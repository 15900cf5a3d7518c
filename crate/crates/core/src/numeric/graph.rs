//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. Node order is execution order, so a reverse walk
//! over the tape visits each node once after all of its consumers.

use std::collections::HashMap;

use super::macs;
use super::tensor::{broadcast_index_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The elementwise op kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Exp,
    Softplus,
    Sigmoid,
    Silu,
}

/// An op whose backward rule lives outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// `needs[i]` is false for inputs that do not require a gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Binary {
        kind: ElementwiseOp,
        a: Var,
        b: Var,
        // Present only when the operand was broadcast.
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Unary {
        kind: ElementwiseOp,
        x: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    MeanGroups {
        x: Var,
        group: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    RowSoftmax {
        x: Var,
    },
    RmsNorm {
        x: Var,
        inv: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
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

pub(crate) fn scalar_fn(kind: ElementwiseOp, x: f64) -> f64 {
    match kind {
        ElementwiseOp::Exp => x.exp(),
        ElementwiseOp::Softplus => softplus(x),
        ElementwiseOp::Sigmoid => sigmoid(x),
        ElementwiseOp::Silu => x * sigmoid(x),
        _ => unreachable!("binary op used as unary"),
    }
}

fn scalar_deriv(kind: ElementwiseOp, x: f64, y: f64) -> f64 {
    match kind {
        ElementwiseOp::Exp => y,
        ElementwiseOp::Softplus => sigmoid(x),
        ElementwiseOp::Sigmoid => y * (1.0 - y),
        ElementwiseOp::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        _ => unreachable!(),
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient, independent of any model tensor.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a model tensor. Trainable tensors are keyed by address so a
    /// parameter used in several places maps to one leaf and its gradient
    /// accumulates. The tensor must not move while the graph is alive.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if !t.requires_grad {
            let mut c = t.clone();
            c.grad = None;
            return self.constant(c);
        }
        let key = t as *const Tensor as usize;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let mut c = t.clone();
        c.grad = None;
        let v = self.variable(c);
        self.params.insert(key, v);
        v
    }

    pub fn elementwise(&mut self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul, Some(b)) => {
                self.binary(kind, a, b)
            }
            (ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul, None) => Err(
                Error::InvalidArgument(format!("{kind:?} needs two operands")),
            ),
            (_, None) => Ok(self.unary(kind, a)),
            (_, Some(_)) => Err(Error::InvalidArgument(format!(
                "{kind:?} takes a single operand"
            ))),
        }
    }

    fn binary(&mut self, kind: ElementwiseOp, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let map_a = (sa != out_shape).then(|| broadcast_index_map(&sa, &out_shape));
        let map_b = (sb != out_shape).then(|| broadcast_index_map(&sb, &out_shape));
        let da = self.value(a).data();
        let db = self.value(b).data();
        let n: usize = out_shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            _ => unreachable!(),
        };
        let data: Vec<f64> = match (&map_a, &map_b) {
            (None, None) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let x = match &map_a { Some(m) => da[m[i]], None => da[i] };
                    let y = match &map_b { Some(m) => db[m[i]], None => db[i] };
                    f(x, y)
                })
                .collect(),
        };
        if kind == ElementwiseOp::Mul {
            macs::charge(n);
        }
        let value = Tensor::new(&out_shape, data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
            tracked,
        ))
    }

    fn unary(&mut self, kind: ElementwiseOp, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| scalar_fn(kind, v)).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Unary { kind, x }, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Exp, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(ElementwiseOp::Silu, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        macs::charge(value.numel());
        let tracked = self.tracked(x);
        self.push(value, Op::Scale { x, c }, tracked)
    }

    /// Sign flip; not charged as a multiply.
    pub fn neg(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| -v).collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Scale { x, c: -1.0 }, tracked)
    }

    /// Sums a list of same-shape vars.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of empty list".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
                context: "matmul",
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        macs::charge(m * k * n);
        let value = Tensor::new(&[m, n], out)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul { a, b }, tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: "transpose needs a matrix".into(),
            });
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let value = Tensor::new(&[c, r], transpose_raw(xv.data(), r, c))?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Transpose { x }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape { x }, tracked))
    }

    /// Picks rows of a matrix (or of the leading axis) by index; repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &r in idx {
            if r >= rows {
                return Err(Error::InvalidArgument(format!(
                    "row {r} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(xv.row(r));
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(&shape, data)?;
        let tracked = self.tracked(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean over consecutive blocks of `group` rows: (g·n) × c → n × c.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || group == 0 || !xv.rows().is_multiple_of(group) {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: format!("rows not divisible into groups of {group}"),
            });
        }
        let (rows, cols) = (xv.rows(), xv.cols());
        let n = rows / group;
        let mut data = vec![0.0; n * cols];
        for r in 0..rows {
            let dst = &mut data[(r / group) * cols..(r / group + 1) * cols];
            for (d, s) in dst.iter_mut().zip(xv.row(r)) {
                *d += s;
            }
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        macs::charge(n * cols);
        let value = Tensor::new(&[n, cols], data)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::MeanGroups { x, group }, tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    left: self.shape(parts[0]).to_vec(),
                    right: v.shape().to_vec(),
                    context: "concat_cols",
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], data)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            tracked,
        ))
    }

    /// Stacks 2-D parts with equal column counts top to bottom.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    left: self.shape(parts[0]).to_vec(),
                    right: v.shape().to_vec(),
                    context: "concat_rows",
                });
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, cols], data)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            tracked,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || width == 0 || start + width > xv.cols() {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}..{} of {:?}",
                start + width,
                xv.shape()
            )));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let value = Tensor::new(&[rows, width], data)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::SliceCols { x, start }, tracked))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: "softmax needs a matrix".into(),
            });
        }
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape(), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::RowSoftmax { x }, tracked))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps)` without a learned scale. Charges
    /// one multiply per element for the squares and one for the rescale.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: "rms_norm needs a matrix".into(),
            });
        }
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        let mut inv = Vec::with_capacity(xv.rows());
        for row in data.chunks_mut(cols) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let s = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= s);
            inv.push(s);
        }
        macs::charge(2 * data.len());
        let value = Tensor::new(xv.shape(), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::RmsNorm { x, inv }, tracked))
    }

    /// Mean cross-entropy of row-wise logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
                context: "cross_entropy",
            });
        }
        let cols = lv.cols();
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(cols).zip(labels) {
            if y >= cols {
                return Err(Error::InvalidArgument(format!("label {y} >= {cols}")));
            }
            softmax_in_place(row);
            loss -= row[y].max(f64::MIN_POSITIVE).ln();
        }
        loss /= labels.len() as f64;
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let tracked = inputs.iter().any(|&v| self.tracked(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            tracked,
        )
    }

    /// Fills gradients of every tracked node with respect to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let n = g.len();
                let xa = |j: usize| match map_a { Some(m) => da[m[j]], None => da[j] };
                let xb = |j: usize| match map_b { Some(m) => db[m[j]], None => db[j] };
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    ElementwiseOp::Add => (g.to_vec(), g.to_vec()),
                    ElementwiseOp::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    ElementwiseOp::Mul => (
                        (0..n).map(|j| g[j] * xb(j)).collect(),
                        (0..n).map(|j| g[j] * xa(j)).collect(),
                    ),
                    _ => unreachable!(),
                };
                let ga = reduce_broadcast(ga, map_a.as_deref(), da.len());
                let gb = reduce_broadcast(gb, map_b.as_deref(), db.len());
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Unary { kind, x } => {
                let xd = self.value(*x).data();
                let yd = node.value.data();
                let gx = (0..g.len())
                    .map(|j| g[j] * scalar_deriv(*kind, xd[j], yd[j]))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Scale { x, c } => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.tracked(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    self.accumulate(grads, *a, matmul_raw(g, &bt, m, n, k));
                }
                if self.tracked(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose { x } => {
                let s = node.value.shape();
                self.accumulate(grads, *x, transpose_raw(g, s[0], s[1]));
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut gx = vec![0.0; xv.numel()];
                for (k, &r) in idx.iter().enumerate() {
                    for c in 0..cols {
                        gx[r * cols + c] += g[k * cols + c];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanGroups { x, group } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let inv = 1.0 / *group as f64;
                let mut gx = vec![0.0; xv.numel()];
                for r in 0..xv.rows() {
                    let src = &g[(r / group) * cols..(r / group + 1) * cols];
                    for c in 0..cols {
                        gx[r * cols + c] = src[c] * inv;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.tracked(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.tracked(p) {
                        self.accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let w = node.value.cols();
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RowSoftmax { x } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = ys[c] * (gs[c] - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RmsNorm { x, inv } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut gx = vec![0.0; y.len()];
                for (r, &s) in inv.iter().enumerate() {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let mean: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = s * (gs[c] - ys[c] * mean);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let cols = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    gx[r * cols + y] -= scale;
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.tracked(v)).collect();
                let gs = op.backward(&values, &node.value, g, &needs);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        self.accumulate(grads, v, gv);
                    }
                }
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    /// Gradient for a tensor bound through [`Graph::param`]; zeros when the
    /// tensor was bound but did not influence the loss.
    pub fn param_grad(&self, t: &Tensor) -> Option<Tensor> {
        let v = *self.params.get(&(t as *const Tensor as usize))?;
        Some(self.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
    }
}

fn reduce_broadcast(g: Vec<f64>, map: Option<&[usize]>, len: usize) -> Vec<f64> {
    match map {
        None => g,
        Some(m) => {
            let mut out = vec![0.0; len];
            for (j, v) in g.into_iter().enumerate() {
                out[m[j]] += v;
            }
            out
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn add_and_unaries() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);

        let z = g.constant(t(&[1], &[0.0]));
        let si = g.silu(z);
        assert_eq!(g.value(si).item(), 0.0);
        let sp = g.softplus(z);
        assert!((g.value(sp).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
        assert!(g.elementwise(ElementwiseOp::Mul, a, None).is_err());
    }

    #[test]
    fn matmul_identity_and_row_select() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let e = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let col = g.constant(t(&[2, 1], &[7.5, -2.0]));
        let p = g.matmul(e, col).unwrap();
        assert_eq!(g.value(p).data(), &[7.5]);

        let bad = g.constant(Tensor::zeros(&[3, 1]));
        assert!(g.matmul(m, bad).is_err());
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut g = Graph::new();
        let x = g.variable(t(&[3], &[0.3, -1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shared_param_binds_once() {
        let w = Tensor::filled(&[1], 3.0).into_param();
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.param_grad(&w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let l = g.variable(Tensor::zeros(&[2, 4]));
        let ce = g.cross_entropy(l, &[1, 3]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn broadcast_add_matches_tiling_bitwise() {
        let row = t(&[3], &[0.1, 0.2, 0.7]);
        let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let tiled = super::super::tensor::broadcast_to(&row, &[2, 3]).unwrap();
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(m.clone()), g.constant(row), g.constant(tiled));
        let x = g.add(a, b).unwrap();
        let y = g.add(a, c).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }
}
