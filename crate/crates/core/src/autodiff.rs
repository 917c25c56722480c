//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! execution order, which is already a topological order, so `backward`
//! replays the tape in reverse and accumulation order is deterministic.
//! Only nodes that depend on a trainable leaf carry gradients.

use std::cell::RefCell;

use crate::error::{shape_str, Error, Result};
use crate::ops::{self, Conv3dSpec, KeyMask, Resample};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Broadcast(Var),
    Softmax(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv3dSpec,
    },
    Resample(Var, Resample),
    Normalize(Var, Vec<T>),
    Sum(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` is untracked or disconnected.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Ok(Var(nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// A value that never receives gradients.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
        });
        Var(nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&self, t: Tensor<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: true,
        });
        Var(nodes.len() - 1)
    }

    fn binary_broadcast(&self, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((a, b));
        }
        let out = ops::broadcast_shape(&sa, &sb)?;
        let a = if sa == out { a } else { self.broadcast_to(a, &out)? };
        let b = if sb == out { b } else { self.broadcast_to(b, &out)? };
        Ok((a, b))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_broadcast(a, b)?;
        let v = self.value(a).add(&self.value(b))?;
        self.push(v, Op::Add(a, b), self.tracked(a) || self.tracked(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_broadcast(a, b)?;
        let v = self.value(a).sub(&self.value(b))?;
        self.push(v, Op::Sub(a, b), self.tracked(a) || self.tracked(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.binary_broadcast(a, b)?;
        let v = self.value(a).mul(&self.value(b))?;
        self.push(v, Op::Mul(a, b), self.tracked(a) || self.tracked(b))
    }

    pub fn scale(&self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c), self.tracked(a))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.push(v, Op::Silu(a), self.tracked(a))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(&self.value(a), &self.value(b))?;
        self.push(v, Op::MatMul(a, b), self.tracked(a) || self.tracked(b))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = ops::permute(&self.value(a), axes)?;
        self.push(v, Op::Permute(a, axes.to_vec()), self.tracked(a))
    }

    pub fn transpose_last2(&self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(a), self.tracked(a))
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let vals: Vec<Tensor<T>> = xs.iter().map(|&x| self.value(x)).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().collect();
        let v = ops::concat(&refs, axis)?;
        let tracked = xs.iter().any(|&x| self.tracked(x));
        self.push(v, Op::Concat(xs.to_vec(), axis), tracked)
    }

    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = ops::narrow(&self.value(a), axis, start, len)?;
        self.push(v, Op::Narrow(a, axis, start), self.tracked(a))
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = ops::broadcast_to(&self.value(a), shape)?;
        self.push(v, Op::Broadcast(a), self.tracked(a))
    }

    pub fn softmax_lastdim(&self, a: Var, mask: Option<&KeyMask>) -> Result<Var> {
        let v = ops::softmax_lastdim(&self.value(a), mask)?;
        self.push(v, Op::Softmax(a), self.tracked(a))
    }

    pub fn conv3d(&self, x: Var, w: Var, b: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        let bias = b.map(|b| self.value(b));
        let v = ops::conv3d(&self.value(x), &self.value(w), bias.as_ref(), &spec)?;
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(v, Op::Conv3d { x, w, b, spec }, tracked)
    }

    pub fn resample2x(&self, a: Var, dir: Resample) -> Result<Var> {
        let v = ops::resample2x(&self.value(a), dir)?;
        self.push(v, Op::Resample(a, dir), self.tracked(a))
    }

    pub fn normalize_lastdim(&self, a: Var, eps: f64) -> Result<Var> {
        let (v, inv_std) = ops::normalize_lastdim(&self.value(a), eps)?;
        self.push(v, Op::Normalize(a, inv_std), self.tracked(a))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), self.tracked(a))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = numel(&self.shape(a)).max(1);
        let s = self.sum(a)?;
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!(
                "mse shape mismatch: {} vs {}",
                shape_str(&sa),
                shape_str(&sb)
            )));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// `x @ w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::dim(format!(
                "linear: input {} does not match weight {}",
                shape_str(&xs),
                shape_str(&ws)
            )));
        }
        let rows = numel(&xs) / ws[0];
        let flat = self.reshape(x, &[rows, ws[0]])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = ws[1];
        self.reshape(y, &out_shape)
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if numel(nodes[loss.0].value.shape()) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(nodes[loss.0].value.shape())
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut send = |v: Var, contrib: Vec<T>| {
                if !nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|&x| -x).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    if nodes[a.0].tracked {
                        send(*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect());
                    }
                    if nodes[b.0].tracked {
                        send(*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect());
                    }
                }
                Op::Scale(a, c) => send(*a, g.iter().map(|&x| x * *c).collect()),
                Op::Silu(a) => {
                    let d = val(*a)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gy)| {
                            let s = T::one() / (T::one() + (-x).exp());
                            gy * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    send(*a, d);
                }
                Op::MatMul(a, b) => {
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g);
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[a.0].tracked {
                        let da = ops::matmul(&gt, &ops::transpose_last2(vb)?)?;
                        send(*a, ops::sum_to_shape(&da, va.shape())?.to_vec());
                    }
                    if nodes[b.0].tracked {
                        let db = ops::matmul(&ops::transpose_last2(va)?, &gt)?;
                        send(*b, ops::sum_to_shape(&db, vb.shape())?.to_vec());
                    }
                }
                Op::Permute(a, axes) => {
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g);
                    let back = ops::permute(&gt, &ops::inverse_permutation(axes))?;
                    send(*a, back.to_vec());
                }
                Op::Reshape(a) => send(*a, g),
                Op::Concat(xs, axis) => {
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g);
                    let mut start = 0;
                    for &x in xs {
                        let len = val(x).shape()[*axis];
                        if nodes[x.0].tracked {
                            send(x, ops::narrow(&gt, *axis, start, len)?.to_vec());
                        }
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let in_shape = val(*a).shape();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let full = in_shape[*axis] * inner;
                    let len = node.value.shape()[*axis] * inner;
                    let mut d = vec![T::zero(); numel(in_shape)];
                    for o in 0..outer {
                        let dst = o * full + start * inner;
                        d[dst..dst + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                    }
                    send(*a, d);
                }
                Op::Broadcast(a) => {
                    let gt = Tensor::from_parts(node.value.shape().to_vec(), g);
                    send(*a, ops::sum_to_shape(&gt, val(*a).shape())?.to_vec());
                }
                Op::Softmax(a) => send(*a, ops::softmax_backward(&node.value, &g)),
                Op::Conv3d { x, w, b, spec } => {
                    let (dx, dw, db) = ops::conv3d_backward(
                        val(*x),
                        val(*w),
                        &g,
                        spec,
                        nodes[x.0].tracked,
                        nodes[w.0].tracked,
                    );
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                    if let Some(dw) = dw {
                        send(*w, dw);
                    }
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::Resample(a, dir) => {
                    send(*a, ops::resample2x_backward(&g, val(*a).shape(), *dir));
                }
                Op::Normalize(a, inv_std) => {
                    send(*a, ops::normalize_backward(&node.value, inv_std, &g));
                }
                Op::Sum(a) => {
                    let n = val(*a).numel();
                    send(*a, vec![g[0]; n]);
                }
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn op_name<T: Real>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Silu(..) => "silu",
        Op::MatMul(..) => "matmul",
        Op::Permute(..) => "permute",
        Op::Reshape(..) => "reshape",
        Op::Concat(..) => "concat",
        Op::Narrow(..) => "narrow",
        Op::Broadcast(..) => "broadcast",
        Op::Softmax(..) => "softmax",
        Op::Conv3d { .. } => "conv3d",
        Op::Resample(..) => "resample2x",
        Op::Normalize(..) => "normalize",
        Op::Sum(..) => "sum",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn quadratic_gradient() {
        let g = Graph::<f64>::new();
        let x0 = Tensor::from_f64(vec![4], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let x = g.param(x0.clone());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &x0.scale(2.0));
    }

    #[test]
    fn disconnected_param_has_no_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![2], 1.0));
        let p = g.param(Tensor::full(vec![3], 1.0));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(p).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![2], 1.0));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_are_not_tracked() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(vec![2], 3.0));
        let x = g.param(Tensor::full(vec![2], 1.0));
        let y = g.mul(c, x).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![1], 2.0));
        let a = g.scale(x, 3.0).unwrap();
        let b = g.mul(x, x).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let g = Graph::<f64>::new();
        let mut r = RngStream::new(1);
        let x = g.constant(r.normal_tensor(vec![3, 4]));
        let b = g.param(Tensor::zeros(vec![4]));
        let y = g.add(x, b).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[3.0; 4]);
    }
}
