//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`].
//! Nodes whose inputs do not require gradients are stored as constants, so
//! inference through the same code path records nothing that backward would
//! need. [`Tape::backward`] walks the nodes in reverse and returns the
//! gradients of every leaf that requires them; a leaf the loss does not
//! depend on gets an all-zero gradient.
//!
//! Elementwise operations broadcast only over leading axes: an operand whose
//! shape is a suffix of the other operand's shape is repeated. A graph lives
//! on one thread; separate tapes are independent.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Slope of the negative half of LeakyReLU.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    LeakyRelu { a: usize, slope: f64 },
    Softmax { a: usize },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat { parts: Vec<usize> },
    SumAxis { a: usize, axis: usize },
    Mse { a: usize, b: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&self, len: usize) {
        self.nodes.borrow_mut().truncate(len);
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Smallest `|x|` over the inputs of recorded LeakyReLU nodes, or
    /// infinity if there are none. Finite-difference checks with a step
    /// near this size straddle the kink and are not meaningful.
    pub fn kink_margin(&self) -> f64 {
        let nodes = self.nodes.borrow();
        nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::LeakyRelu { a, .. } => Some(nodes[a].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Computes d`loss`/d(node) for every node the loss depends on and
    /// returns the gradients of the leaves.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            propagate(&node.op, &node.value, &g, &mut acc);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        for (id, node) in nodes.iter().enumerate().take(loss.id + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Tensor>>,
}

impl<'a> Accumulator<'a> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn value(&self, id: usize) -> &'a Tensor {
        &self.nodes[id].value
    }

    fn add(&mut self, id: usize, data: Vec<f64>) {
        let shape = self.nodes[id].value.shape().to_vec();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(Tensor::new(shape, data).expect("gradient shape")),
        }
    }

    /// Adds `g` to the gradient of `id`, summing over leading axes the
    /// operand was broadcast across.
    fn add_reduced(&mut self, id: usize, g: impl Iterator<Item = f64>) {
        let n = self.nodes[id].value.len();
        let mut out = vec![0.0; n];
        for (i, v) in g.enumerate() {
            out[i % n] += v;
        }
        self.add(id, out);
    }
}

fn propagate(op: &Op, out: &Tensor, g: &Tensor, acc: &mut Accumulator<'_>) {
    let gd = g.data();
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (acc.value(*a), acc.value(*b));
            let k = bv.shape()[0];
            let n = bv.shape()[1];
            let rows = av.len() / k;
            if acc.wants(*a) {
                let mut da = vec![0.0; av.len()];
                gemm(rows, n, k, gd, false, bv.data(), true, &mut da, false);
                acc.add(*a, da);
            }
            if acc.wants(*b) {
                let mut db = vec![0.0; bv.len()];
                gemm(k, rows, n, av.data(), true, gd, false, &mut db, false);
                acc.add(*b, db);
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (acc.value(*a), acc.value(*b));
            let (groups, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = out.shape()[2];
            if acc.wants(*a) {
                let mut da = vec![0.0; av.len()];
                for grp in 0..groups {
                    let gs = &gd[grp * m * n..(grp + 1) * m * n];
                    let bs = &bv.data()[grp * k * n..(grp + 1) * k * n];
                    let das = &mut da[grp * m * k..(grp + 1) * m * k];
                    // b is k x n (or n x k when transposed in the forward pass).
                    gemm(m, n, k, gs, false, bs, !*trans_b, das, false);
                }
                acc.add(*a, da);
            }
            if acc.wants(*b) {
                let mut db = vec![0.0; bv.len()];
                for grp in 0..groups {
                    let gs = &gd[grp * m * n..(grp + 1) * m * n];
                    let as_ = &av.data()[grp * m * k..(grp + 1) * m * k];
                    let dbs = &mut db[grp * k * n..(grp + 1) * k * n];
                    if *trans_b {
                        gemm(n, m, k, gs, true, as_, false, dbs, false);
                    } else {
                        gemm(k, m, n, as_, true, gs, false, dbs, false);
                    }
                }
                acc.add(*b, db);
            }
        }
        Op::Add { a, b } => {
            for id in [*a, *b] {
                if acc.wants(id) {
                    acc.add_reduced(id, gd.iter().copied());
                }
            }
        }
        Op::Sub { a, b } => {
            if acc.wants(*a) {
                acc.add_reduced(*a, gd.iter().copied());
            }
            if acc.wants(*b) {
                acc.add_reduced(*b, gd.iter().map(|v| -v));
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (acc.value(*a), acc.value(*b));
            let (na, nb) = (av.len(), bv.len());
            if acc.wants(*a) {
                let it = gd.iter().enumerate().map(|(i, g)| g * bv.data()[i % nb]);
                acc.add_reduced(*a, it);
            }
            if acc.wants(*b) {
                let it = gd.iter().enumerate().map(|(i, g)| g * av.data()[i % na]);
                acc.add_reduced(*b, it);
            }
        }
        Op::Scale { a, factor } => {
            acc.add(*a, gd.iter().map(|g| g * factor).collect());
        }
        Op::LeakyRelu { a, slope } => {
            let x = acc.value(*a);
            let d = gd
                .iter()
                .zip(x.data())
                .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                .collect();
            acc.add(*a, d);
        }
        Op::Softmax { a } => {
            let d = out.last_dim();
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for r in 0..y.len() / d {
                let ys = &y[r * d..(r + 1) * d];
                let gs = &gd[r * d..(r + 1) * d];
                let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                for j in 0..d {
                    dx[r * d + j] = ys[j] * (gs[j] - dot);
                }
            }
            acc.add(*a, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normed,
            inv_std,
        } => {
            let d = out.last_dim();
            let rows = normed.len() / d;
            let gam = acc.value(*gamma).data();
            if acc.wants(*gamma) {
                let mut dg = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += gd[r * d + j] * normed[r * d + j];
                    }
                }
                acc.add(*gamma, dg);
            }
            if acc.wants(*beta) {
                acc.add_reduced(*beta, gd.iter().copied());
            }
            if acc.wants(*x) {
                let mut dx = vec![0.0; normed.len()];
                let inv_d = 1.0 / d as f64;
                for r in 0..rows {
                    let xh = &normed[r * d..(r + 1) * d];
                    let gs = &gd[r * d..(r + 1) * d];
                    let mut sum = 0.0;
                    let mut sum_xh = 0.0;
                    for j in 0..d {
                        let dxh = gs[j] * gam[j];
                        sum += dxh;
                        sum_xh += dxh * xh[j];
                    }
                    for j in 0..d {
                        let dxh = gs[j] * gam[j];
                        dx[r * d + j] =
                            inv_std[r] * (dxh - sum * inv_d - xh[j] * sum_xh * inv_d);
                    }
                }
                acc.add(*x, dx);
            }
        }
        Op::Concat { parts } => {
            let total = out.last_dim();
            let rows = out.len() / total;
            let mut offset = 0;
            for &p in parts {
                let w = acc.value(p).last_dim();
                if acc.wants(p) {
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    acc.add(p, dp);
                }
                offset += w;
            }
        }
        Op::SumAxis { a, axis } => {
            let shape = acc.value(*a).shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut da = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            acc.add(*a, da);
        }
        Op::Mse { a, b } => {
            let (av, bv) = (acc.value(*a), acc.value(*b));
            let scale = 2.0 * gd[0] / av.len() as f64;
            let diff: Vec<f64> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| scale * (x - y))
                .collect();
            if acc.wants(*b) {
                acc.add(*b, diff.iter().map(|v| -v).collect());
            }
            if acc.wants(*a) {
                acc.add(*a, diff);
            }
        }
        Op::Reshape { a } => acc.add(*a, gd.to_vec()),
        Op::Permute { a, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (data, _) = permute_data(gd, out.shape(), &inverse);
            acc.add(*a, data);
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut index = vec![0usize; rank];
    for _ in 0..data.len() {
        let offset: usize = index.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[offset]);
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < out_shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    (out, out_shape)
}

/// Output shape of a leading-axis broadcast, if the shapes are compatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    long.ends_with(short).then(|| long.to_vec())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn emit(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = inputs.iter().any(|&i| self.tape.requires_grad(i));
        self.tape.push(Arc::new(value), op, rg)
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if b.shape().len() != 2 || a.shape().is_empty() {
            return Err(mismatch());
        }
        let (k, n) = (b.shape()[0], b.shape()[1]);
        if a.last_dim() != k {
            return Err(mismatch());
        }
        let rows = a.len() / k.max(1);
        let mut c = vec![0.0; rows * n];
        gemm(rows, k, n, a.data(), false, b.data(), false, &mut c, false);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, c)?;
        Ok(self.emit(value, Op::MatMul { a: self.id, b: rhs.id }, &[self.id, rhs.id]))
    }

    /// Batched product `[g, m, k] x [g, k, n] -> [g, m, n]`; with `trans_b`
    /// the right operand is given as `[g, n, k]`.
    pub fn bmm(&self, rhs: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let mismatch = || Error::ShapeMismatch {
            op: "bmm",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.shape().len() != 3 || b.shape().len() != 3 || a.shape()[0] != b.shape()[0] {
            return Err(mismatch());
        }
        let (groups, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bk, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        if bk != k {
            return Err(mismatch());
        }
        let mut c = vec![0.0; groups * m * n];
        for grp in 0..groups {
            gemm(
                m,
                k,
                n,
                &a.data()[grp * m * k..(grp + 1) * m * k],
                false,
                &b.data()[grp * k * n..(grp + 1) * k * n],
                trans_b,
                &mut c[grp * m * n..(grp + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new([groups, m, n], c)?;
        let op = Op::BatchMatMul {
            a: self.id,
            b: rhs.id,
            trans_b,
        };
        Ok(self.emit(value, op, &[self.id, rhs.id]))
    }

    fn elementwise(
        &self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let (na, nb) = (ad.len(), bd.len());
        let data = (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect();
        Ok(self.emit(Tensor::new(shape, data)?, op, &[self.id, rhs.id]))
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Add { a: self.id, b: rhs.id };
        self.elementwise(rhs, "add", |x, y| x + y, op)
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Sub { a: self.id, b: rhs.id };
        self.elementwise(rhs, "sub", |x, y| x - y, op)
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let op = Op::Mul { a: self.id, b: rhs.id };
        self.elementwise(rhs, "mul", |x, y| x * y, op)
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.emit(value, Op::Scale { a: self.id, factor }, &[self.id])
    }

    pub fn leaky_relu(&self) -> Var<'t> {
        self.leaky_relu_with(LEAKY_RELU_SLOPE)
    }

    pub fn leaky_relu_with(&self, slope: f64) -> Var<'t> {
        let a = self.value();
        let data = a
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v * slope })
            .collect();
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.emit(value, Op::LeakyRelu { a: self.id, slope }, &[self.id])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let a = self.value();
        let d = a.last_dim();
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.emit(value, Op::Softmax { a: self.id }, &[self.id])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let d = x.last_dim();
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = x.len() / d;
        let mut normed = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xs = &x.data()[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (xs[j] - mean) * inv;
                normed[r * d + j] = xh;
                out[r * d + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            normed,
            inv_std,
        };
        Ok(self.emit(value, op, &[self.id, gamma.id, beta.id]))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let values: Vec<Arc<Tensor>> = parts.iter().map(Var::value).collect();
        let lead = &values[0].shape()[..values[0].shape().len().saturating_sub(1)];
        for v in &values[1..] {
            let vs = v.shape();
            if vs.is_empty() || &vs[..vs.len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: values[0].shape().to_vec(),
                    rhs: vs.to_vec(),
                });
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat { parts: ids.clone() };
        Ok(first.emit(Tensor::new(shape, data)?, op, &ids))
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() {
            return Err(Error::ShapeMismatch {
                op: "sum_axis",
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &a.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.emit(value, Op::SumAxis { a: self.id, axis }, &[self.id]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&self) -> Result<Var<'t>> {
        let n = self.value().len();
        self.reshape([n])?.sum_axis(0)
    }

    /// Mean of squared differences over all elements, as a scalar.
    pub fn mse(&self, target: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let sum: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(sum / a.len().max(1) as f64);
        let op = Op::Mse {
            a: self.id,
            b: target.id,
        };
        Ok(self.emit(value, op, &[self.id, target.id]))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.emit(value, Op::Reshape { a: self.id }, &[self.id]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let rank = a.shape().len();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank
            && perm
                .iter()
                .all(|&p| p < rank && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::ShapeMismatch {
                op: "permute",
                lhs: a.shape().to_vec(),
                rhs: perm.to_vec(),
            });
        }
        let (data, shape) = permute_data(a.data(), a.shape(), perm);
        let op = Op::Permute {
            a: self.id,
            perm: perm.to_vec(),
        };
        Ok(self.emit(Tensor::new(shape, data)?, op, &[self.id]))
    }
}
