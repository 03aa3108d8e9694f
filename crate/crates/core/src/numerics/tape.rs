//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every primitive appends a node holding its forward value. Inputs always
//! precede their consumers, so the backward pass is a single sweep over
//! the node list in reverse, which fixes the accumulation order and makes
//! gradients bit-reproducible.
//!
//! Elementwise binary primitives broadcast over unit extents: a `1 × c`
//! row, an `r × 1` column or a `1 × 1` scalar combine with an `r × c`
//! operand.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, Tensor, NORM_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, f64),
    Sigmoid(NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Relu(NodeId),
    Clamp(NodeId, f64, f64),
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    NormalizeRows(NodeId),
    MaskMul(NodeId, Tensor),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    MaskedRowProduct(NodeId, Tensor),
    LogSumExpRows(NodeId, Option<Tensor>),
    SelectPerRow(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive evaluations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn broadcast_dims(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            left: vec![a.0, a.1],
            right: vec![b.0, b.1],
        }),
    }
}

#[inline]
fn bidx(dims: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if dims.0 == 1 { 0 } else { r };
    let cc = if dims.1 == 1 { 0 } else { c };
    rr * dims.1 + cc
}

/// Sums a broadcast gradient back down to the operand's extents.
fn reduce_to(grad: &Tensor, target: &Tensor) -> Tensor {
    if grad.dims() == target.dims() {
        return grad.clone().reshaped(target.shape().to_vec());
    }
    let (r, c) = grad.dims();
    let tdims = target.dims();
    let mut out = Tensor::zeros_like(target);
    let od = out.data_mut();
    let gd = grad.data();
    for i in 0..r {
        for j in 0..c {
            od[bidx(tdims, i, j)] += gd[i * c + j];
        }
    }
    out
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, needs_grad: bool) -> Result<NodeId> {
        value.check_finite(op)?;
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("constant", value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims();
        let (k2, n) = self.value(b).dims();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::matrix(m, n, data)?, Op::MatMul(a, b), needs)
    }

    /// `a · bᵀ` for `a: m × k`, `b: n × k`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims();
        let (n, k2) = self.value(b).dims();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let data = gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), 1, k);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul_nt", Tensor::matrix(m, n, data)?, Op::MatMulNt(a, b), needs)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let va = self.value(a);
        let vb = self.value(b);
        let (da, db) = (va.dims(), vb.dims());
        let value = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            let (r, c) = broadcast_dims(name, da, db)?;
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    data.push(f(va.data()[bidx(da, i, j)], vb.data()[bidx(db, i, j)]));
                }
            }
            Tensor::matrix(r, c, data)?
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(name, value, op, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let value = self.value(a).map(f);
        let needs = self.needs(a);
        self.push(name, value, op, needs)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.unary("scale", a, |x| s * x, Op::Affine(a, s))
    }

    /// `s · a + t`.
    pub fn affine(&mut self, a: NodeId, s: f64, t: f64) -> Result<NodeId> {
        self.unary("affine", a, |x| s * x + t, Op::Affine(a, s))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::numeric("ln", format!("log of non-positive value {bad}")));
        }
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Elementwise `max(x, 0)`.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(a);
        self.push("mean", Tensor::scalar(m), Op::Mean(a), needs)
    }

    /// Row sums: `r × c → r × 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = v.dims();
        let data = (0..r).map(|i| v.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let needs = self.needs(a);
        self.push("sum_cols", Tensor::matrix(r, 1, data)?, Op::SumCols(a), needs)
    }

    /// Row-wise `x / max(‖x‖₂, 1e-12)`.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.value(a).l2_normalized_rows();
        let needs = self.needs(a);
        self.push("normalize_rows", value, Op::NormalizeRows(a), needs)
    }

    /// Elementwise product with a fixed mask of identical extents.
    pub fn mask_mul(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        let v = self.value(a);
        if !v.same_shape(&mask) {
            return Err(Error::Shape {
                op: "mask_mul",
                left: v.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let data = v.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push("mask_mul", value, Op::MaskMul(a, mask), needs)
    }

    /// Horizontal concatenation of operands with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero operands"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims();
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: vec![rows],
                    right: vec![r, c],
                });
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat_cols",
            Tensor::matrix(rows, total, data)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let value = self.value(a).gather_rows(indices)?;
        let needs = self.needs(a);
        self.push("gather_rows", value, Op::GatherRows(a, indices.to_vec()), needs)
    }

    /// Per row, the product of the entries where `mask` is non-zero
    /// (`r × c → r × 1`); an all-zero mask row yields 1.
    pub fn masked_row_product(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId> {
        let v = self.value(a);
        if !v.same_shape(&mask) {
            return Err(Error::Shape {
                op: "masked_row_product",
                left: v.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let (r, c) = v.dims();
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let mut p = 1.0;
            for j in 0..c {
                if mask.data()[i * c + j] != 0.0 {
                    p *= v.data()[i * c + j];
                }
            }
            data.push(p);
        }
        let needs = self.needs(a);
        self.push(
            "masked_row_product",
            Tensor::matrix(r, 1, data)?,
            Op::MaskedRowProduct(a, mask),
            needs,
        )
    }

    /// Per row `log Σ_j exp(a_ij)`, restricted to entries where `mask` is
    /// non-zero when a mask is given (`r × c → r × 1`).
    pub fn log_sum_exp_rows(&mut self, a: NodeId, mask: Option<Tensor>) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = v.dims();
        if let Some(m) = &mask {
            if !v.same_shape(m) {
                return Err(Error::Shape {
                    op: "log_sum_exp_rows",
                    left: v.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
        }
        let allowed = |i: usize, j: usize| mask.as_ref().map_or(true, |m| m.data()[i * c + j] != 0.0);
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            let row = v.row(i);
            let max = (0..c)
                .filter(|&j| allowed(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!("log-sum-exp row {i} has no admitted entries")));
            }
            let s: f64 = (0..c).filter(|&j| allowed(i, j)).map(|j| (row[j] - max).exp()).sum();
            data.push(max + s.ln());
        }
        let needs = self.needs(a);
        self.push(
            "log_sum_exp_rows",
            Tensor::matrix(r, 1, data)?,
            Op::LogSumExpRows(a, mask),
            needs,
        )
    }

    /// Picks `a[i, columns[i]]` for every row (`r × c → r × 1`).
    pub fn select_per_row(&mut self, a: NodeId, columns: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        let (r, c) = v.dims();
        if columns.len() != r {
            return Err(Error::Shape {
                op: "select_per_row",
                left: vec![r, c],
                right: vec![columns.len()],
            });
        }
        let mut data = Vec::with_capacity(r);
        for (i, &j) in columns.iter().enumerate() {
            if j >= c {
                return Err(Error::contract(format!("column {j} out of range for {c} columns")));
            }
            data.push(v.data()[i * c + j]);
        }
        let needs = self.needs(a);
        self.push(
            "select_per_row",
            Tensor::matrix(r, 1, data)?,
            Op::SelectPerRow(a, columns.to_vec()),
            needs,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(out.shape().to_vec(), vec![1.0])?);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(e, v)| *e += v),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let with = |x: &Tensor, f: &dyn Fn(usize) -> f64| -> Tensor {
            let data = (0..x.len()).map(f).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same extents")
        };
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims();
                let n = vb.cols();
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let d = gemm(m, n, k, g.data(), n, 1, vb.data(), 1, n);
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let d = gemm(k, m, n, va.data(), 1, k, g.data(), n, 1);
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims();
                let n = vb.rows();
                if self.needs(*a) {
                    // dA = dC · B
                    let d = gemm(m, n, k, g.data(), n, 1, vb.data(), k, 1);
                    self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
                }
                if self.needs(*b) {
                    // dB = dCᵀ · A
                    let d = gemm(n, m, k, g.data(), 1, n, va.data(), k, 1);
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), d).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, self.value(*a)));
                self.accumulate(grads, *b, reduce_to(g, self.value(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(g, self.value(*a)));
                self.accumulate(grads, *b, reduce_to(&g.map(|v| -v), self.value(*b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, c) = g.dims();
                let (da, db) = (va.dims(), vb.dims());
                let mut ga = Tensor::zeros(r, c);
                let mut gb = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        let gv = g.data()[i * c + j];
                        ga.data_mut()[i * c + j] = gv * vb.data()[bidx(db, i, j)];
                        gb.data_mut()[i * c + j] = gv * va.data()[bidx(da, i, j)];
                    }
                }
                self.accumulate(grads, *a, reduce_to(&ga, va));
                self.accumulate(grads, *b, reduce_to(&gb, vb));
            }
            Op::Affine(a, s) => self.accumulate(grads, *a, g.map(|v| s * v)),
            Op::Sigmoid(a) => {
                let t = with(y, &|i| g.data()[i] * y.data()[i] * (1.0 - y.data()[i]));
                self.accumulate(grads, *a, t);
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                let t = with(x, &|i| g.data()[i] / x.data()[i]);
                self.accumulate(grads, *a, t);
            }
            Op::Exp(a) => {
                let t = with(y, &|i| g.data()[i] * y.data()[i]);
                self.accumulate(grads, *a, t);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let t = with(x, &|i| if x.data()[i] > 0.0 { g.data()[i] } else { 0.0 });
                self.accumulate(grads, *a, t);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let t = with(x, &|i| {
                    let v = x.data()[i];
                    if v >= *lo && v <= *hi {
                        g.data()[i]
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, t);
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                let gv = g.data()[0];
                self.accumulate(grads, *a, x.map(|_| gv));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gv = g.data()[0] / x.len() as f64;
                self.accumulate(grads, *a, x.map(|_| gv));
            }
            Op::SumCols(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let t = with(x, &|i| g.data()[i / c]);
                self.accumulate(grads, *a, t);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let (r, c) = x.dims();
                let mut t = Tensor::zeros_like(x);
                for i in 0..r {
                    let xr = x.row(i);
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let out = t.row_mut(i);
                    if norm > NORM_EPS {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..c {
                            out[j] = gr[j] / NORM_EPS;
                        }
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::MaskMul(a, mask) => {
                let t = with(g, &|i| g.data()[i] * mask.data()[i]);
                self.accumulate(grads, *a, t);
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let c = vp.cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, p, Tensor::new(vp.shape().to_vec(), data).unwrap());
                    }
                    offset += c;
                }
            }
            Op::GatherRows(a, indices) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut t = Tensor::zeros_like(x);
                for (k, &row) in indices.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    t.row_mut(row).iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
                self.accumulate(grads, *a, t);
            }
            Op::MaskedRowProduct(a, mask) => {
                let x = self.value(*a);
                let (r, c) = x.dims();
                let mut t = Tensor::zeros_like(x);
                for i in 0..r {
                    let xr = x.row(i);
                    let mr = &mask.data()[i * c..(i + 1) * c];
                    let gi = g.data()[i];
                    for k in 0..c {
                        if mr[k] == 0.0 {
                            continue;
                        }
                        let mut p = 1.0;
                        for j in 0..c {
                            if j != k && mr[j] != 0.0 {
                                p *= xr[j];
                            }
                        }
                        t.row_mut(i)[k] = gi * p;
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::LogSumExpRows(a, mask) => {
                let x = self.value(*a);
                let (r, c) = x.dims();
                let mut t = Tensor::zeros_like(x);
                for i in 0..r {
                    let lse = y.data()[i];
                    let gi = g.data()[i];
                    let xr = x.row(i);
                    let out = t.row_mut(i);
                    for j in 0..c {
                        let ok = mask.as_ref().map_or(true, |m| m.data()[i * c + j] != 0.0);
                        if ok {
                            out[j] = gi * (xr[j] - lse).exp();
                        }
                    }
                }
                self.accumulate(grads, *a, t);
            }
            Op::SelectPerRow(a, columns) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut t = Tensor::zeros_like(x);
                for (i, &j) in columns.iter().enumerate() {
                    t.data_mut()[i * c + j] = g.data()[i];
                }
                self.accumulate(grads, *a, t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sigmoid_at_zero_and_its_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0)).unwrap();
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.value(y).item().unwrap(), 0.5);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0)).unwrap();
        let y = t.leaf(Tensor::scalar(3.0)).unwrap();
        let z = t.mul(x, y).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap().item().unwrap(), 3.0);
        assert_eq!(g.get(y).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn mean_and_sum_distribute_exactly() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let m = t.mean(x).unwrap();
        assert_eq!(t.value(m).item().unwrap(), 2.0);
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0 / 3.0; 3]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn normalize_three_four() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let y = t.normalize_rows(x).unwrap();
        let v = t.value(y).data();
        assert!(close(v[0], 0.6, 1e-15) && close(v[1], 0.8, 1e-15));
    }

    #[test]
    fn ln_of_non_positive_is_numeric_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(matches!(t.ln(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3)).unwrap();
        let b = t.leaf(Tensor::zeros(2, 3)).unwrap();
        match t.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = t.leaf(Tensor::zeros(3, 2)).unwrap();
        assert!(matches!(t.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn overflow_surfaces_as_numeric_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(t.exp(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn broadcast_gradients_reduce_over_unit_axes() {
        let mut t = Tape::new();
        let m = t
            .leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let row = t.leaf(Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let col = t.leaf(Tensor::matrix(2, 1, vec![2.0, 3.0]).unwrap()).unwrap();
        let s = t.add(m, row).unwrap();
        let p = t.mul(s, col).unwrap();
        let out = t.sum(p).unwrap();
        let g = t.backward(out).unwrap();
        assert_eq!(g.get(row).unwrap().data(), &[5.0, 5.0, 5.0]);
        // col grads: sum of (m + 1) per row
        assert_eq!(g.get(col).unwrap().data(), &[9.0, 18.0]);
    }

    #[test]
    fn masked_product_and_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![0.5, 0.2, 0.9]).unwrap()).unwrap();
        let mask = Tensor::matrix(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let p = t.masked_row_product(x, mask).unwrap();
        assert!(close(t.value(p).item().unwrap(), 0.45, 1e-15));
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        let gx = g.get(x).unwrap().data();
        assert!(close(gx[0], 0.9, 1e-15) && gx[1] == 0.0 && close(gx[2], 0.5, 1e-15));
    }

    #[test]
    fn log_sum_exp_respects_mask() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 50.0]).unwrap()).unwrap();
        let mask = Tensor::matrix(1, 3, vec![1.0, 1.0, 0.0]).unwrap();
        let l = t.log_sum_exp_rows(x, Some(mask)).unwrap();
        let want = (1f64.exp() + 2f64.exp()).ln();
        assert!(close(t.value(l).item().unwrap(), want, 1e-12));
    }
}
