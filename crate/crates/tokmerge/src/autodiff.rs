//! Tape-based reverse-mode differentiation over [`Tensor`] operations.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] walks the record
//! once in exact reverse execution order and accumulates gradients by
//! addition across fan-out. Two non-standard primitives are first class:
//!
//! * [`Tape::stop_gradient`]: value passes through bitwise, gradient does
//!   not flow past it (the stopped node has no parents).
//! * [`Tape::ste_passthrough`]: forward takes a given discrete tensor,
//!   backward applies the identity Jacobian to the continuous surrogate.
//!
//! Only first-order derivatives are supported. A tape is single-threaded;
//! run one tape per batch for data parallelism.

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad_scalar, strides_for, Tensor};
use crate::Elem;
use std::cell::{Cell, RefCell};

/// Handle to a node on a tape. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Matmul(Var, Var),
    Scale(Var, Elem),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    SoftmaxLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Tensor },
    MeanAxis { x: Var, axis: usize },
    SumAll(Var),
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    GatherRows { x: Var, indices: Vec<usize>, m: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    TopkLast { x: Var, indices: Vec<usize>, k: usize },
    Ste { soft: Var },
    CrossEntropy { logits: Var, probs: Tensor, labels: Vec<usize> },
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` did not participate.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn with2<R>(&self, a: Var, b: Var, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    fn with1<R>(&self, a: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| x.add(y))?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| x.sub(y))?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| x.mul(y))?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Mul(a, b)))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| x.div(y))?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Div(a, b)))
    }

    /// Elementwise max; on ties the gradient goes to the first operand.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| x.maximum(y))?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Maximum(a, b)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.with2(a, b, |x, y| x.matmul(y))?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Matmul(a, b)))
    }

    pub fn scale(&self, a: Var, c: Elem) -> Var {
        let v = self.with1(a, |x| x.scale(c));
        self.push(v, self.rg(a), Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: Elem) -> Var {
        let v = self.with1(a, |x| x.add_scalar(c));
        self.push(v, self.rg(a), Op::AddScalar(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.with1(a, |x| x.relu());
        self.push(v, self.rg(a), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.with1(a, |x| x.sigmoid());
        self.push(v, self.rg(a), Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let v = self.with1(a, |x| x.exp());
        self.push(v, self.rg(a), Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let v = self.with1(a, |x| x.ln());
        self.push(v, self.rg(a), Op::Ln(a))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let v = self.with1(a, |x| x.gelu());
        self.push(v, self.rg(a), Op::Gelu(a))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = self.with1(a, |x| x.permute(axes))?;
        Ok(self.push(v, self.rg(a), Op::Permute { x: a, axes: axes.to_vec() }))
    }

    pub fn transpose_last(&self, a: Var) -> Result<Var> {
        let nd = self.shape_of(a).len();
        if nd < 2 {
            return Err(Error::shape("transpose_last needs >= 2 dims".to_string()));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.with1(a, |x| x.reshape(shape))?;
        Ok(self.push(v, self.rg(a), Op::Reshape(a)))
    }

    pub fn softmax_last(&self, a: Var) -> Result<Var> {
        let v = self.with1(a, |x| x.softmax_last())?;
        Ok(self.push(v, self.rg(a), Op::SoftmaxLast(a)))
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: Elem) -> Result<Var> {
        let (y, xhat, inv_std) = self.with1(x, |xv| -> Result<_> {
            let nd = xv.ndim();
            if nd == 0 {
                return Err(Error::shape("layer_norm needs >= 1 dim".to_string()));
            }
            let d = xv.shape()[nd - 1];
            let rows = xv.len() / d;
            let mut xhat = vec![0.0; xv.len()];
            let mut inv = vec![0.0; rows];
            let data = xv.data();
            for r in 0..rows {
                let row = &data[r * d..(r + 1) * d];
                let mean: Elem = row.iter().sum::<Elem>() / d as Elem;
                let var: Elem = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Elem>() / d as Elem;
                let istd = 1.0 / (var + eps).sqrt();
                inv[r] = istd;
                for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = (v - mean) * istd;
                }
            }
            let mut inv_shape = xv.shape().to_vec();
            inv_shape[nd - 1] = 1;
            Ok((
                Tensor::new(xv.shape().to_vec(), xhat.clone())?,
                Tensor::new(xv.shape().to_vec(), xhat)?,
                Tensor::new(inv_shape, inv)?,
            ))
        })?;
        let y = self.with2(gamma, beta, |g, b| y.mul(g)?.add(b))?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(y, rg, Op::LayerNorm { x, gamma, beta, xhat, inv_std }))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let v = self.with1(a, |x| x.mean_axis(axis))?;
        Ok(self.push(v, self.rg(a), Op::MeanAxis { x: a, axis }))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let v = Tensor::scalar(self.with1(a, |x| x.sum_all()));
        self.push(v, self.rg(a), Op::SumAll(a))
    }

    pub fn index_select(&self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let v = self.with1(a, |x| x.index_select(axis, indices))?;
        Ok(self.push(
            v,
            self.rg(a),
            Op::IndexSelect { x: a, axis, indices: indices.to_vec() },
        ))
    }

    /// Per-sample row selection on axis 1: x is [B, N, ..], `indices` holds
    /// `m` rows for each of the B samples, flattened row-major.
    pub fn gather_rows(&self, a: Var, indices: &[usize], m: usize) -> Result<Var> {
        let v = self.with1(a, |x| -> Result<Tensor> {
            if x.ndim() < 2 {
                return Err(Error::shape("gather_rows needs >= 2 dims".to_string()));
            }
            let b = x.shape()[0];
            let n = x.shape()[1];
            if indices.len() != b * m {
                return Err(Error::shape(format!(
                    "gather_rows: {} indices for batch {} x {}",
                    indices.len(),
                    b,
                    m
                )));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
                return Err(Error::invalid(format!("gather_rows index {} >= {}", bad, n)));
            }
            let inner: usize = x.shape()[2..].iter().product();
            let mut out_shape = x.shape().to_vec();
            out_shape[1] = m;
            let mut data = Vec::with_capacity(b * m * inner);
            for bi in 0..b {
                for &i in &indices[bi * m..(bi + 1) * m] {
                    let s = (bi * n + i) * inner;
                    data.extend_from_slice(&x.data()[s..s + inner]);
                }
            }
            Tensor::new(out_shape, data)
        })?;
        Ok(self.push(
            v,
            self.rg(a),
            Op::GatherRows { x: a, indices: indices.to_vec(), m },
        ))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let nodes = self.nodes.borrow();
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.0].value).collect();
        let v = Tensor::concat(&tensors, axis)?;
        let rg = parts.iter().any(|p| nodes[p.0].requires_grad);
        drop(nodes);
        Ok(self.push(v, rg, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.with1(a, |x| x.narrow(axis, start, len))?;
        Ok(self.push(v, self.rg(a), Op::Narrow { x: a, axis, start }))
    }

    /// k largest along the last axis; indices are not differentiable, the
    /// values route gradients back to their source positions.
    pub fn topk_last(&self, a: Var, k: usize) -> Result<(Var, Vec<usize>)> {
        let (v, idx) = self.with1(a, |x| x.topk_last(k))?;
        let var = self.push(
            v,
            self.rg(a),
            Op::TopkLast { x: a, indices: idx.clone(), k },
        );
        Ok((var, idx))
    }

    /// Value passes through bitwise; no parents, so gradients stop here.
    pub fn stop_gradient(&self, a: Var) -> Var {
        let v = self.value(a);
        self.push(v, false, Op::Leaf)
    }

    /// Straight-through estimator: forward takes `hard`, backward passes the
    /// incoming gradient to `soft` unchanged.
    pub fn ste_passthrough(&self, soft: Var, hard: &Tensor) -> Result<Var> {
        let s_shape = self.shape_of(soft);
        if s_shape != hard.shape() {
            return Err(Error::shape(format!(
                "ste_passthrough soft {:?} vs hard {:?}",
                s_shape,
                hard.shape()
            )));
        }
        Ok(self.push(hard.clone(), self.rg(soft), Op::Ste { soft }))
    }

    /// Mean softmax cross-entropy over the batch. `logits` is [B, classes].
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = self.with1(logits, |lg| -> Result<(Elem, Tensor)> {
            if lg.ndim() != 2 {
                return Err(Error::shape(format!("cross_entropy on {:?}", lg.shape())));
            }
            let (b, c) = (lg.shape()[0], lg.shape()[1]);
            if labels.len() != b {
                return Err(Error::shape(format!("{} labels for batch {}", labels.len(), b)));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::invalid(format!("label {} >= classes {}", bad, c)));
            }
            let probs = lg.softmax_last()?;
            let mut loss = 0.0;
            for (bi, &lab) in labels.iter().enumerate() {
                let row = &lg.data()[bi * c..(bi + 1) * c];
                let m = row.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
                let lse: Elem = m + row.iter().map(|v| (v - m).exp()).sum::<Elem>().ln();
                loss += lse - row[lab];
            }
            Ok((loss / b as Elem, probs))
        })?;
        Ok(self.push(
            Tensor::scalar(loss),
            self.rg(logits),
            Op::CrossEntropy { logits, probs, labels: labels.to_vec() },
        ))
    }

    /// Reverse pass from a scalar loss. Populates a gradient for every
    /// participating node; consume-once per tape.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.consumed.get() {
            return Err(Error::autodiff("backward called twice on one tape"));
        }
        self.consumed.set(true);
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::autodiff(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));

        for id in (0..=loss.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let acc = |grads: &mut Vec<Option<Tensor>>, v: Var, delta: Tensor| -> Result<()> {
                if !nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(cur) => *cur = cur.add(&delta)?,
                    slot @ None => *slot = Some(delta),
                }
                Ok(())
            };
            match &nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    acc(&mut grads, *a, g.reduce_to_shape(sa)?)?;
                    acc(&mut grads, *b, g.reduce_to_shape(sb)?)?;
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    acc(&mut grads, *a, g.reduce_to_shape(sa)?)?;
                    acc(&mut grads, *b, g.scale(-1.0).reduce_to_shape(sb)?)?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    acc(&mut grads, *a, g.mul(bv)?.reduce_to_shape(av.shape())?)?;
                    acc(&mut grads, *b, g.mul(av)?.reduce_to_shape(bv.shape())?)?;
                }
                Op::Div(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let out = &nodes[id].value;
                    acc(&mut grads, *a, g.div(bv)?.reduce_to_shape(av.shape())?)?;
                    let db = g.mul(out)?.div(bv)?.scale(-1.0);
                    acc(&mut grads, *b, db.reduce_to_shape(bv.shape())?)?;
                }
                Op::Maximum(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let mask_a = av.binary(bv, |x, y| if x >= y { 1.0 } else { 0.0 })?;
                    let mask_b = mask_a.map(|v| 1.0 - v);
                    acc(&mut grads, *a, g.mul(&mask_a)?.reduce_to_shape(av.shape())?)?;
                    acc(&mut grads, *b, g.mul(&mask_b)?.reduce_to_shape(bv.shape())?)?;
                }
                Op::Matmul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let da = g.matmul(&bv.transpose_last()?)?;
                    acc(&mut grads, *a, da.reduce_to_shape(av.shape())?)?;
                    let db = av.transpose_last()?.matmul(&g)?;
                    acc(&mut grads, *b, db.reduce_to_shape(bv.shape())?)?;
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c))?,
                Op::AddScalar(a) => acc(&mut grads, *a, g)?,
                Op::Relu(a) => {
                    let mask = nodes[a.0].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, g.mul(&mask)?)?;
                }
                Op::Sigmoid(a) => {
                    let y = &nodes[id].value;
                    let dy = y.map(|v| v * (1.0 - v));
                    acc(&mut grads, *a, g.mul(&dy)?)?;
                }
                Op::Exp(a) => acc(&mut grads, *a, g.mul(&nodes[id].value)?)?,
                Op::Ln(a) => acc(&mut grads, *a, g.div(&nodes[a.0].value)?)?,
                Op::Gelu(a) => {
                    let dy = nodes[a.0].value.map(gelu_grad_scalar);
                    acc(&mut grads, *a, g.mul(&dy)?)?;
                }
                Op::Permute { x, axes } => {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    acc(&mut grads, *x, g.permute(&inv)?)?;
                }
                Op::Reshape(a) => {
                    acc(&mut grads, *a, g.reshape(nodes[a.0].value.shape())?)?;
                }
                Op::SoftmaxLast(a) => {
                    let y = &nodes[id].value;
                    let nd = y.ndim();
                    let gy = g.mul(y)?;
                    let s = gy.sum_axis(nd - 1)?;
                    let mut kshape = s.shape().to_vec();
                    kshape.push(1);
                    let s = s.reshape(&kshape)?;
                    acc(&mut grads, *a, g.sub(&s)?.mul(y)?)?;
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = &nodes[gamma.0].value;
                    let d = *xhat.shape().last().unwrap();
                    let nd = xhat.ndim();
                    acc(&mut grads, *gamma, g.mul(xhat)?.reduce_to_shape(gv.shape())?)?;
                    acc(
                        &mut grads,
                        *beta,
                        g.reduce_to_shape(nodes[beta.0].value.shape())?,
                    )?;
                    if nodes[x.0].requires_grad {
                        let dxhat = g.mul(gv)?;
                        let sum1 = {
                            let s = dxhat.sum_axis(nd - 1)?;
                            let mut ks = s.shape().to_vec();
                            ks.push(1);
                            s.reshape(&ks)?
                        };
                        let sum2 = {
                            let s = dxhat.mul(xhat)?.sum_axis(nd - 1)?;
                            let mut ks = s.shape().to_vec();
                            ks.push(1);
                            s.reshape(&ks)?
                        };
                        let dx = dxhat
                            .scale(d as Elem)
                            .sub(&sum1)?
                            .sub(&xhat.mul(&sum2)?)?
                            .mul(inv_std)?
                            .scale(1.0 / d as Elem);
                        acc(&mut grads, *x, dx)?;
                    }
                }
                Op::MeanAxis { x, axis } => {
                    let xs = nodes[x.0].value.shape().to_vec();
                    let n = xs[*axis];
                    let mut gshape = g.shape().to_vec();
                    gshape.insert(*axis, 1);
                    let expanded = g.reshape(&gshape)?.add(&Tensor::zeros(&xs))?;
                    acc(&mut grads, *x, expanded.scale(1.0 / n as Elem))?;
                }
                Op::SumAll(a) => {
                    let xs = nodes[a.0].value.shape();
                    acc(&mut grads, *a, Tensor::full(xs, g.data()[0]))?;
                }
                Op::IndexSelect { x, axis, indices } => {
                    let zero = Tensor::zeros(nodes[x.0].value.shape());
                    acc(&mut grads, *x, zero.scatter_add(*axis, indices, &g)?)?;
                }
                Op::GatherRows { x, indices, m } => {
                    let xs = nodes[x.0].value.shape();
                    let (b, n) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let mut dx = Tensor::zeros(xs);
                    let gd = g.data();
                    let dd = dx.data_mut();
                    for bi in 0..b {
                        for (j, &i) in indices[bi * m..(bi + 1) * m].iter().enumerate() {
                            let s = (bi * m + j) * inner;
                            let d = (bi * n + i) * inner;
                            for t in 0..inner {
                                dd[d + t] += gd[s + t];
                            }
                        }
                    }
                    acc(&mut grads, *x, dx)?;
                }
                Op::Concat { parts, axis } => {
                    let mut off = 0usize;
                    for p in parts {
                        let e = nodes[p.0].value.shape()[*axis];
                        acc(&mut grads, *p, g.narrow(*axis, off, e)?)?;
                        off += e;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let xs = nodes[x.0].value.shape();
                    let len = g.shape()[*axis];
                    let idx: Vec<usize> = (*start..*start + len).collect();
                    let dx = Tensor::zeros(xs).scatter_add(*axis, &idx, &g)?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::TopkLast { x, indices, k } => {
                    let xs = nodes[x.0].value.shape();
                    let last = *xs.last().unwrap();
                    let rows = indices.len() / k;
                    let mut dx = Tensor::zeros(xs);
                    let gd = g.data();
                    let dd = dx.data_mut();
                    for r in 0..rows {
                        for j in 0..*k {
                            dd[r * last + indices[r * k + j]] += gd[r * k + j];
                        }
                    }
                    acc(&mut grads, *x, dx)?;
                }
                Op::Ste { soft } => acc(&mut grads, *soft, g)?,
                Op::CrossEntropy { logits, probs, labels } => {
                    let (b, c) = (probs.shape()[0], probs.shape()[1]);
                    let mut dl = probs.clone();
                    for (bi, &lab) in labels.iter().enumerate() {
                        dl.data_mut()[bi * c + lab] -= 1.0;
                    }
                    acc(&mut grads, *logits, dl.scale(g.data()[0] / b as Elem))?;
                }
            }
            grads[id] = None;
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }
}

/// Row-major flat index helper shared by tests.
pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    strides_for(shape).iter().zip(idx).map(|(s, i)| s * i).sum()
}
