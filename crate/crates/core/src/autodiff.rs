//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only arena of nodes. Every public operation
//! evaluates its forward kernel immediately, stores the value, and records
//! which inputs produced it. Nodes are appended after their inputs, so the
//! arena order is already a topological order and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Only nodes that depend on a tracked leaf ([`Tape::variable`]) carry a
//! backward rule; everything else is a constant for differentiation.
//!
//! ```
//! use stseq2seq::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::vector(&[1.0, 2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{bmm_dims, gemm, slot_dims, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise primitives exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `alpha * x + beta`; the backward rule only needs `alpha`.
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    MatMul(Var, Var),
    SlotMatMul(Var, Var),
    SoftmaxRows(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Bmm(Var, Var),
    SwapAxes(Var, usize, usize),
    Shift { input: Var, axis: usize, offset: isize },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar loss with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node is untracked or does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient or zeros shaped like `like`.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, input: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.nodes[input.0].tracked;
        self.push(value, if tracked { op } else { Op::Leaf }, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let tracked = self.nodes[a.0].tracked || self.nodes[b.0].tracked;
        self.push(value, if tracked { op } else { Op::Leaf }, tracked)
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = matches!(op, ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul);
        match (need_b, b) {
            (true, Some(b)) => match op {
                ElementwiseOp::Add => self.add(a, b),
                ElementwiseOp::Sub => self.sub(a, b),
                _ => self.mul(a, b),
            },
            (false, None) => Ok(match op {
                ElementwiseOp::Sigmoid => self.sigmoid(a),
                ElementwiseOp::Tanh => self.tanh(a),
                ElementwiseOp::Relu => self.relu(a),
                _ => self.exp(a),
            }),
            (true, None) => Err(Error::Usage(format!("{op:?} needs two operands"))),
            (false, Some(_)) => Err(Error::Usage(format!("{op:?} takes one operand"))),
        }
    }

    /// Sum; `b` may match `a` or broadcast as a shape suffix (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Sub(a, b)))
    }

    /// Hadamard product, same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Mul(a, b)))
    }

    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let v = self.value(a).map(|x| alpha * x + beta);
        self.unary(a, v, Op::Affine(a, alpha))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.unary(a, v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.unary(a, v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.unary(a, v, Op::Abs(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.binary(a, b, v, Op::MatMul(a, b)))
    }

    /// `m: [A, B]` applied to each slot of `x: [B, D]` or `[P, B, D]`.
    pub fn slot_matmul(&mut self, m: Var, x: Var) -> Result<Var> {
        let v = self.value(m).slot_matmul(self.value(x))?;
        Ok(self.binary(m, x, v, Op::SlotMatMul(m, x)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        self.unary(a, v, Op::SoftmaxRows(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let v = Tensor::concat(&values, axis)?;
        let tracked = inputs.iter().any(|&i| self.nodes[i.0].tracked);
        let op = if tracked { Op::Concat(inputs.to_vec(), axis) } else { Op::Leaf };
        Ok(self.push(v, op, tracked))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice(axis, start, len)?;
        Ok(self.unary(a, v, Op::Slice { input: a, axis, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.unary(a, v, Op::Reshape(a)))
    }

    /// Batched matrix product `[B, m, k] x [B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).bmm(self.value(b))?;
        Ok(self.binary(a, b, v, Op::Bmm(a, b)))
    }

    pub fn swap_axes(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let v = self.value(a).swap_axes(i, j)?;
        Ok(self.unary(a, v, Op::SwapAxes(a, i, j)))
    }

    pub fn swap_leading(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).swap_leading()?;
        Ok(self.unary(a, v, Op::SwapAxes(a, 0, 1)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 2 {
            return Err(Error::dim("transpose", format!("{:?}", self.value(a).shape())));
        }
        self.swap_leading(a)
    }

    /// Shift along axis 0 with zero fill: `out[t] = a[t + offset]`.
    pub fn time_shift(&mut self, a: Var, offset: isize) -> Var {
        self.shift(a, 0, offset).expect("axis 0 exists")
    }

    /// Shift along `axis` with zero fill.
    pub fn shift(&mut self, a: Var, axis: usize, offset: isize) -> Result<Var> {
        let v = self.value(a).shift(axis, offset)?;
        Ok(self.unary(a, v, Op::Shift { input: a, axis, offset }))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.tracked {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &self.nodes[id];
                g.filter(|_| node.tracked)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let tracked = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if tracked(a) {
                    accumulate(grads, a, g.iter().copied());
                }
                if tracked(b) {
                    let reduced = reduce_broadcast(g.iter().map(|x| sign * x), val(b).numel());
                    accumulate(grads, b, reduced);
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                let inner = bv.len();
                if tracked(a) {
                    accumulate_into(grads, a, g.len(), |buf, _| {
                        for (bc, gc) in buf.chunks_mut(inner).zip(g.chunks(inner)) {
                            for ((d, x), y) in bc.iter_mut().zip(gc).zip(bv) {
                                *d += x * y;
                            }
                        }
                    });
                }
                if tracked(b) {
                    let reduced = reduce_broadcast(g.iter().zip(av).map(|(x, a)| x * a), inner);
                    accumulate(grads, b, reduced);
                }
            }
            &Op::Affine(a, alpha) => accumulate(grads, a, g.iter().map(|x| alpha * x)),
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                accumulate(grads, a, g.iter().zip(y).map(|(x, y)| x * y * (1.0 - y)));
            }
            &Op::Tanh(a) => {
                let y = node.value.data();
                accumulate(grads, a, g.iter().zip(y).map(|(x, y)| x * (1.0 - y * y)));
            }
            &Op::Relu(a) => {
                let xs = val(a).data();
                accumulate(grads, a, g.iter().zip(xs).map(|(x, &v)| if v > 0.0 { *x } else { 0.0 }));
            }
            &Op::Exp(a) => {
                let y = node.value.data();
                accumulate(grads, a, g.iter().zip(y).map(|(x, y)| x * y));
            }
            &Op::Abs(a) => {
                let xs = val(a).data();
                accumulate(grads, a, g.iter().zip(xs).map(|(x, &v)| x * sign(v)));
            }
            &Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.numel() / k;
                if tracked(a) {
                    accumulate_into(grads, a, m * k, |da, beta| {
                        gemm(m, n, k, g, (n, 1), bv.data(), (1, n), da, beta);
                    });
                }
                if tracked(b) {
                    accumulate_into(grads, b, k * n, |db, beta| {
                        gemm(k, m, n, av.data(), (1, k), g, (n, 1), db, beta);
                    });
                }
            }
            &Op::SlotMatMul(mv, xv) => {
                let (mt, xt) = (val(mv), val(xv));
                let (slots, b, d) = slot_dims(mt, xt).expect("shapes validated in forward");
                let a = mt.shape()[0];
                if tracked(mv) {
                    accumulate_into(grads, mv, a * b, |dm, _| {
                        for s in 0..slots {
                            let gs = &g[s * a * d..(s + 1) * a * d];
                            let xs = &xt.data()[s * b * d..(s + 1) * b * d];
                            gemm(a, d, b, gs, (d, 1), xs, (1, d), dm, 1.0);
                        }
                    });
                }
                if tracked(xv) {
                    accumulate_into(grads, xv, slots * b * d, |dx, beta| {
                        for s in 0..slots {
                            let gs = &g[s * a * d..(s + 1) * a * d];
                            let ds = &mut dx[s * b * d..(s + 1) * b * d];
                            gemm(b, a, d, mt.data(), (1, b), gs, (d, 1), ds, beta);
                        }
                    });
                }
            }
            &Op::Bmm(av, bv) => {
                let (at, bt) = (val(av), val(bv));
                let (batch, m, k, n) = bmm_dims(at, bt).expect("shapes validated in forward");
                if tracked(av) {
                    accumulate_into(grads, av, batch * m * k, |da, beta| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bt.data()[i * k * n..(i + 1) * k * n];
                            gemm(m, n, k, gi, (n, 1), bi, (1, n), &mut da[i * m * k..(i + 1) * m * k], beta);
                        }
                    });
                }
                if tracked(bv) {
                    accumulate_into(grads, bv, batch * k * n, |db, beta| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &at.data()[i * m * k..(i + 1) * m * k];
                            gemm(k, m, n, ai, (1, k), gi, (n, 1), &mut db[i * k * n..(i + 1) * k * n], beta);
                        }
                    });
                }
            }
            &Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = y * (g - dot);
                    }
                }
                accumulate(grads, a, da);
            }
            Op::Concat(inputs, axis) => {
                let axis = *axis;
                let shape = node.value.shape();
                let outer: usize = shape[..axis].iter().product();
                let tail: usize = shape[axis + 1..].iter().product();
                let row = shape[axis] * tail;
                let mut offset = 0;
                for &input in inputs {
                    let chunk = val(input).shape()[axis] * tail;
                    if tracked(input) {
                        accumulate_into(grads, input, outer * chunk, |buf, _| {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + chunk];
                                add_assign(&mut buf[o * chunk..(o + 1) * chunk], src);
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { input, axis, start } => {
                let in_shape = val(input).shape();
                let outer: usize = in_shape[..axis].iter().product();
                let tail: usize = in_shape[axis + 1..].iter().product();
                let len = node.value.shape()[axis];
                accumulate_into(grads, input, val(input).numel(), |da, _| {
                    for o in 0..outer {
                        let dst = o * in_shape[axis] * tail + start * tail;
                        add_assign(&mut da[dst..dst + len * tail], &g[o * len * tail..(o + 1) * len * tail]);
                    }
                });
            }
            &Op::Reshape(a) => accumulate(grads, a, g.iter().copied()),
            &Op::SwapAxes(a, i, j) => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                accumulate(grads, a, gt.swap_axes(i, j).expect("axes checked in forward").into_data());
            }
            &Op::Shift { input, axis, offset } => {
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                accumulate(grads, input, gt.shift(axis, -offset).expect("axis checked in forward").into_data());
            }
            &Op::Sum(a) => {
                let n = val(a).numel();
                accumulate(grads, a, std::iter::repeat(g[0]).take(n));
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn reduce_broadcast(g: impl Iterator<Item = f64>, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; inner];
    let mut i = 0;
    for x in g {
        out[i] += x;
        i += 1;
        if i == inner {
            i = 0;
        }
    }
    out
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Hands `f` the gradient buffer of `var`, creating a zeroed one if needed.
/// The second argument is 0 for a fresh buffer and 1 otherwise, for kernels
/// that can overwrite instead of add.
fn accumulate_into(grads: &mut [Option<Vec<f64>>], var: Var, len: usize, f: impl FnOnce(&mut [f64], f64)) {
    match &mut grads[var.0] {
        Some(existing) => f(existing, 1.0),
        slot @ None => {
            let mut buf = vec![0.0; len];
            f(&mut buf, 0.0);
            *slot = Some(buf);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: impl IntoIterator<Item = f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution.into_iter().collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_linear_has_unit_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(&[3.0, -1.0, 0.5]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_and_sigmoid_gradients() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(&[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);

        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros([3]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data(), &[0.5; 3]);
        let loss = tape.sum(s);
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[0.25; 3]);
    }

    #[test]
    fn elementwise_dispatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let b = tape.constant(Tensor::vector(&[4.0, 5.0, 6.0]));
        let p = tape.elementwise(ElementwiseOp::Mul, a, Some(b)).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0, 10.0, 18.0]);
        let r = tape.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let r = tape.elementwise(ElementwiseOp::Relu, r, None).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::zeros([2]));
        let t = tape.elementwise(ElementwiseOp::Tanh, z, None).unwrap();
        assert_eq!(tape.value(t).data(), &[0.0, 0.0]);
        assert!(tape.elementwise(ElementwiseOp::Add, a, None).is_err());
        assert!(tape.elementwise(ElementwiseOp::Exp, a, Some(b)).is_err());
        let bad = tape.constant(Tensor::zeros([2]));
        assert!(tape.elementwise(ElementwiseOp::Add, a, Some(bad)).is_err());
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let x = tape.variable(Tensor::vector(&[3.0, 4.0]));
        let p = tape.mul(c, x).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::vector(&[2.0]));
        let a = tape.scale(x, 3.0);
        let b = tape.exp(x);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert!((g.get(x).unwrap().item() - (3.0 + 2f64.exp())).abs() < 1e-12);
    }
}
