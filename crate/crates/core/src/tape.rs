//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar replays the record in reverse and returns
//! the gradient of every leaf that asked for one. Tapes are cheap and meant
//! to be rebuilt for every optimizer step.
//!
//! Broadcasting is deliberately narrow. Binary elementwise ops accept
//! operands whose shapes are equal, or where one shape is a trailing suffix
//! of the other, or where one operand holds a single value. Anything else
//! goes through [`Var::reshape`] and [`Var::expand`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{split_axis, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    Shift(f64),
    Exp,
    Log,
    Tanh,
    Softplus,
    Sigmoid,
    Relu,
    Sqrt,
    Square,
    Abs,
    LnGamma,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    MatMul(usize, usize),
    Softmax(usize),
    LogSumExp(usize),
    SumAxis { x: usize, axis: usize },
    SumAll(usize),
    Concat { xs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape(usize),
    TransposeLast(usize),
    Expand(usize),
    Gather { x: usize, index: Arc<Vec<Option<usize>>> },
    TriSolve { l: usize, b: usize },
    Reparam { x: usize, dydx: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// Record of operations for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, grad });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        self.constant(Tensor::zeros(shape))
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].grad
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::config("concat of zero tensors"))?
            .value();
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::config(format!("concat axis {axis} out of range for {nd}-d")));
        }
        let values: Vec<Tensor> = xs.iter().map(|v| v.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != nd
                || s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::config(format!(
                    "concat: shape {:?} incompatible with {:?} on axis {axis}",
                    s,
                    first.shape()
                )));
            }
            total += s[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let grad = xs.iter().any(|v| self.needs_grad(v.id));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.iter().map(|v| v.id).collect(),
                axis,
            },
            grad,
        ))
    }

    /// Records a value produced outside the tape (for instance a
    /// reparameterized sample) together with its elementwise derivative with
    /// respect to `x`.
    pub fn reparam<'t>(&'t self, x: Var<'t>, value: Tensor, dydx: Vec<f64>) -> Result<Var<'t>> {
        if value.shape() != x.value().shape() || dydx.len() != value.numel() {
            return Err(Error::config("reparam: value/derivative shape mismatch"));
        }
        let grad = self.needs_grad(x.id);
        Ok(self.push(value, Op::Reparam { x: x.id, dydx }, grad))
    }

    /// Gradient of scalar `loss` with respect to every leaf that requires one.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.grad {
                continue;
            }
            backprop(&nodes, id, &node.op, &node.value, g, &mut grads, &mut leaves);
        }
        Ok(Gradients { leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: &Var<'_>) -> Tensor {
        match self.leaves.get(&v.id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(v.value().shape()),
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

#[allow(clippy::too_many_arguments)]
fn backprop(
    nodes: &[Node],
    id: usize,
    op: &Op,
    out: &Tensor,
    g: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
    leaves: &mut HashMap<usize, Tensor>,
) {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].grad;
    match op {
        Op::Leaf => {
            leaves.insert(id, Tensor::from_parts(out.shape().to_vec(), g));
        }
        Op::Unary(kind, x) => {
            if !wants(*x) {
                return;
            }
            let xv = val(*x).data();
            let yv = out.data();
            let dst = slot(grads, *x, xv.len());
            for i in 0..g.len() {
                let d = match kind {
                    Unary::Neg => -1.0,
                    Unary::Scale(c) => *c,
                    Unary::Shift(_) => 1.0,
                    Unary::Exp => yv[i],
                    Unary::Log => 1.0 / xv[i],
                    Unary::Tanh => 1.0 - yv[i] * yv[i],
                    Unary::Softplus => sigmoid(xv[i]),
                    Unary::Sigmoid => yv[i] * (1.0 - yv[i]),
                    Unary::Relu => {
                        if xv[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Unary::Sqrt => 0.5 / yv[i],
                    Unary::Square => 2.0 * xv[i],
                    Unary::Abs => {
                        if xv[i] > 0.0 {
                            1.0
                        } else if xv[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    Unary::LnGamma => statrs::function::gamma::digamma(xv[i]),
                };
                dst[i] += g[i] * d;
            }
        }
        Op::Binary(kind, a, b) => {
            let av = val(*a).data();
            let bv = val(*b).data();
            let (la, lb) = (av.len(), bv.len());
            if wants(*a) {
                let dst = slot(grads, *a, la);
                for i in 0..g.len() {
                    let y = bv[i % lb];
                    let d = match kind {
                        Binary::Add | Binary::Sub => 1.0,
                        Binary::Mul => y,
                        Binary::Div => 1.0 / y,
                    };
                    dst[i % la] += g[i] * d;
                }
            }
            if wants(*b) {
                let dst = slot(grads, *b, lb);
                for i in 0..g.len() {
                    let (x, y) = (av[i % la], bv[i % lb]);
                    let d = match kind {
                        Binary::Add => 1.0,
                        Binary::Sub => -1.0,
                        Binary::Mul => x,
                        Binary::Div => -x / (y * y),
                    };
                    dst[i % lb] += g[i] * d;
                }
            }
        }
        Op::MatMul(a, b) => {
            let at = val(*a);
            let bt = val(*b);
            let plan = MatMulPlan::new(at.shape(), bt.shape()).expect("validated at forward");
            if wants(*a) {
                let dst = slot(grads, *a, at.numel());
                plan.grad_a(&g, bt.data(), dst);
            }
            if wants(*b) {
                let dst = slot(grads, *b, bt.numel());
                plan.grad_b(&g, at.data(), dst);
            }
        }
        Op::Softmax(x) => {
            if !wants(*x) {
                return;
            }
            let y = out.data();
            let n = *out.shape().last().unwrap_or(&1);
            let dst = slot(grads, *x, y.len());
            for r in 0..y.len() / n.max(1) {
                let ys = &y[r * n..(r + 1) * n];
                let gs = &g[r * n..(r + 1) * n];
                let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dst[r * n + j] += ys[j] * (gs[j] - dot);
                }
            }
        }
        Op::LogSumExp(x) => {
            if !wants(*x) {
                return;
            }
            let xv = val(*x);
            let n = *xv.shape().last().unwrap_or(&1);
            let xs = xv.data();
            let lse = out.data();
            let dst = slot(grads, *x, xs.len());
            for r in 0..lse.len() {
                for j in 0..n {
                    let k = r * n + j;
                    let w = if lse[r] == f64::NEG_INFINITY {
                        1.0 / n as f64
                    } else {
                        (xs[k] - lse[r]).exp()
                    };
                    dst[k] += g[r] * w;
                }
            }
        }
        Op::SumAxis { x, axis } => {
            if !wants(*x) {
                return;
            }
            let xv = val(*x);
            let (outer, len, inner) = split_axis(xv.shape(), *axis);
            let dst = slot(grads, *x, xv.numel());
            for o in 0..outer {
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    for i in 0..inner {
                        dst[base + i] += g[o * inner + i];
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if !wants(*x) {
                return;
            }
            let n = val(*x).numel();
            let dst = slot(grads, *x, n);
            for d in dst.iter_mut() {
                *d += g[0];
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &x in xs {
                let len = val(x).shape()[*axis];
                if wants(x) {
                    let dst = slot(grads, x, outer * len * inner);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let d0 = o * len * inner;
                        for k in 0..len * inner {
                            dst[d0 + k] += g[src + k];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            if !wants(*x) {
                return;
            }
            let xv = val(*x);
            let (outer, total, inner) = split_axis(xv.shape(), *axis);
            let len = out.shape()[*axis];
            let dst = slot(grads, *x, xv.numel());
            for o in 0..outer {
                let d0 = (o * total + start) * inner;
                let s0 = o * len * inner;
                for k in 0..len * inner {
                    dst[d0 + k] += g[s0 + k];
                }
            }
        }
        Op::Reshape(x) => {
            if !wants(*x) {
                return;
            }
            let dst = slot(grads, *x, g.len());
            for (d, v) in dst.iter_mut().zip(&g) {
                *d += v;
            }
        }
        Op::TransposeLast(x) => {
            if !wants(*x) {
                return;
            }
            let s = out.shape();
            let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
            let dst = slot(grads, *x, g.len());
            for b in 0..g.len() / (m * n).max(1) {
                let base = b * m * n;
                // out is (m, n); input is (n, m)
                for i in 0..m {
                    for j in 0..n {
                        dst[base + j * m + i] += g[base + i * n + j];
                    }
                }
            }
        }
        Op::Expand(x) => {
            if !wants(*x) {
                return;
            }
            let xv = val(*x);
            let map = expand_index(xv.shape(), out.shape());
            let dst = slot(grads, *x, xv.numel());
            for (i, &src) in map.iter().enumerate() {
                dst[src] += g[i];
            }
        }
        Op::Gather { x, index } => {
            if !wants(*x) {
                return;
            }
            let xv = val(*x);
            let n_in = *xv.shape().last().unwrap_or(&1);
            let n_out = index.len();
            let dst = slot(grads, *x, xv.numel());
            for r in 0..g.len() / n_out.max(1) {
                for (k, src) in index.iter().enumerate() {
                    if let Some(s) = src {
                        dst[r * n_in + s] += g[r * n_out + k];
                    }
                }
            }
        }
        Op::TriSolve { l, b } => {
            let lv = val(*l);
            let s = *out.shape().last().unwrap();
            let xs = out.data();
            let ls = lv.data();
            let batches = xs.len() / s;
            // gb = L^{-T} g ; gL = -gb x^T on the lower triangle
            let mut gb = vec![0.0; xs.len()];
            for r in 0..batches {
                let lm = &ls[r * s * s..(r + 1) * s * s];
                let gr = &g[r * s..(r + 1) * s];
                let out_r = &mut gb[r * s..(r + 1) * s];
                for i in (0..s).rev() {
                    let mut acc = gr[i];
                    for k in i + 1..s {
                        acc -= lm[k * s + i] * out_r[k];
                    }
                    out_r[i] = acc / lm[i * s + i];
                }
            }
            if wants(*l) {
                let dst = slot(grads, *l, ls.len());
                for r in 0..batches {
                    for i in 0..s {
                        for j in 0..=i {
                            dst[r * s * s + i * s + j] -= gb[r * s + i] * xs[r * s + j];
                        }
                    }
                }
            }
            if wants(*b) {
                let dst = slot(grads, *b, xs.len());
                for (d, v) in dst.iter_mut().zip(&gb) {
                    *d += v;
                }
            }
        }
        Op::Reparam { x, dydx } => {
            if !wants(*x) {
                return;
            }
            let dst = slot(grads, *x, g.len());
            for i in 0..g.len() {
                dst[i] += g[i] * dydx[i];
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for positive `y`.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// For each output element of an expand, the input element it reads.
fn expand_index(from: &[usize], to: &[usize]) -> Vec<usize> {
    let in_strides = strides(from);
    let out_strides = strides(to);
    let n: usize = to.iter().product();
    let mut map = Vec::with_capacity(n);
    for i in 0..n {
        let mut src = 0;
        let mut rem = i;
        for d in 0..to.len() {
            let c = rem / out_strides[d];
            rem %= out_strides[d];
            if from[d] != 1 {
                src += c * in_strides[d];
            }
        }
        map.push(src);
    }
    map
}

fn broadcast_shape(a: &[usize], b: &[usize], la: usize, lb: usize) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    if lb == 1 && b.len() <= a.len() {
        return Some(a.to_vec());
    }
    if la == 1 && a.len() <= b.len() {
        return Some(b.to_vec());
    }
    if a.len() >= b.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}

/// How a (batched) matrix product maps onto flat buffers.
struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::config(format!("matmul needs >= 2-d operands, got {a:?} and {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::config(format!("matmul inner dimensions differ: {a:?} x {b:?}")));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let (batch_shape, a_batched, b_batched) = if bb.is_empty() {
            (ab.to_vec(), !ab.is_empty(), false)
        } else if ab.is_empty() {
            (bb.to_vec(), false, true)
        } else if ab == bb {
            (ab.to_vec(), true, true)
        } else {
            return Err(Error::config(format!("matmul batch shapes differ: {a:?} x {b:?}")));
        };
        let mut out_shape = batch_shape.clone();
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatMulPlan {
            batch: batch_shape.iter().product(),
            m,
            k,
            n,
            a_batched,
            b_batched,
            out_shape,
        })
    }

    fn a_off(&self, i: usize) -> usize {
        if self.a_batched {
            i * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, i: usize) -> usize {
        if self.b_batched {
            i * self.k * self.n
        } else {
            0
        }
    }

    fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; self.batch * m * n];
        if !self.b_batched {
            // one weight matrix: treat all batches as extra rows
            let rows = if self.a_batched { self.batch * m } else { m };
            gemm_nn(&a[..rows * k], b, &mut out[..rows * n], rows, k, n);
            if !self.a_batched && self.batch > 1 {
                for i in 1..self.batch {
                    out.copy_within(0..m * n, i * m * n);
                }
            }
            return out;
        }
        for i in 0..self.batch {
            gemm_nn(
                &a[self.a_off(i)..self.a_off(i) + m * k],
                &b[self.b_off(i)..self.b_off(i) + k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        out
    }

    fn grad_a(&self, g: &[f64], b: &[f64], dst: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched && self.a_batched {
            gemm_nt(g, b, dst, self.batch * m, n, k);
            return;
        }
        for i in 0..self.batch {
            let ao = self.a_off(i);
            gemm_nt(
                &g[i * m * n..(i + 1) * m * n],
                &b[self.b_off(i)..self.b_off(i) + k * n],
                &mut dst[ao..ao + m * k],
                m,
                n,
                k,
            );
        }
    }

    fn grad_b(&self, g: &[f64], a: &[f64], dst: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched && self.a_batched {
            gemm_tn(a, g, dst, self.batch * m, k, n);
            return;
        }
        for i in 0..self.batch {
            let bo = self.b_off(i);
            gemm_tn(
                &a[self.a_off(i)..self.a_off(i) + m * k],
                &g[i * m * n..(i + 1) * m * n],
                &mut dst[bo..bo + k * n],
                m,
                k,
                n,
            );
        }
    }
}

/// out(m,n) += a(m,k) * b(k,n)
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(m,k) += g(m,n) * b(k,n)^T
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// out(k,n) += a(m,k)^T * g(m,n)
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// The same value, cut off from the gradient flow.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary(self, kind: Unary) -> Result<Var<'t>> {
        let x = self.value();
        let op: &'static str = match kind {
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::LnGamma => "lgamma",
            _ => "",
        };
        if !op.is_empty() {
            let bad = |v: f64| match kind {
                Unary::Log | Unary::LnGamma => !(v > 0.0),
                _ => !(v >= 0.0),
            };
            if let Some(i) = x.data().iter().position(|&v| bad(v)) {
                return Err(Error::domain(op, i, format!("argument {} outside domain", x.data()[i])));
            }
        }
        let f = |v: f64| match kind {
            Unary::Neg => -v,
            Unary::Scale(c) => c * v,
            Unary::Shift(c) => v + c,
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Tanh => v.tanh(),
            Unary::Softplus => softplus(v),
            Unary::Sigmoid => sigmoid(v),
            Unary::Relu => v.max(0.0),
            Unary::Sqrt => v.sqrt(),
            Unary::Square => v * v,
            Unary::Abs => v.abs(),
            Unary::LnGamma => statrs::function::gamma::ln_gamma(v),
        };
        let grad = self.requires_grad();
        Ok(self.tape.push(x.map(f), Op::Unary(kind, self.id), grad))
    }

    fn binary(self, other: Var<'t>, kind: Binary) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (la, lb) = (a.numel(), b.numel());
        let shape = broadcast_shape(a.shape(), b.shape(), la, lb).ok_or_else(|| {
            Error::config(format!(
                "cannot broadcast {:?} with {:?}",
                a.shape(),
                b.shape()
            ))
        })?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        if kind == Binary::Div {
            if let Some(i) = bd.iter().position(|&v| v == 0.0) {
                return Err(Error::domain("div", i, "division by zero"));
            }
        }
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (ad[i % la], bd[i % lb]);
            out.push(match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            });
        }
        let grad = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Binary(kind, self.id, other.id),
            grad,
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Unary::Neg)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Unary::Scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Unary::Shift(c))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Unary::Tanh)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Unary::Softplus)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Unary::Relu)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Unary::Square)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(Unary::Abs)
    }

    pub fn lgamma(self) -> Result<Var<'t>> {
        self.unary(Unary::LnGamma)
    }

    /// Matrix product over the last two axes. Leading batch axes must match,
    /// or one operand must be a plain matrix shared across the batch.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let plan = MatMulPlan::new(a.shape(), b.shape())?;
        let out = plan.forward(a.data(), b.data());
        let grad = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(plan.out_shape.clone(), out),
            Op::MatMul(self.id, other.id),
            grad,
        ))
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| Error::config("softmax of a scalar"))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let grad = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax(self.id),
            grad,
        ))
    }

    /// log(sum(exp(x))) over the last axis, which is removed.
    pub fn logsumexp(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        let n = *shape
            .last()
            .ok_or_else(|| Error::config("logsumexp of a scalar"))?;
        let mut out = Vec::with_capacity(x.numel() / n.max(1));
        for row in x.data().chunks(n.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m.is_infinite() {
                out.push(m);
                continue;
            }
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            out.push(m + s.ln());
        }
        let grad = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape[..shape.len() - 1].to_vec(), out),
            Op::LogSumExp(self.id),
            grad,
        ))
    }

    /// Sum over `axis`, which is removed.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() {
            return Err(Error::config(format!("sum axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = x.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let grad = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::SumAxis { x: self.id, axis },
            grad,
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        self.sum_axis(axis)?.scale(1.0 / len as f64)
    }

    /// Sum over the last axis.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let nd = self.shape().len();
        if nd == 0 {
            return Err(Error::config("sum_last of a scalar"));
        }
        self.sum_axis(nd - 1)
    }

    /// Sums every axis except the first, leaving shape `(n,)`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::config("sum_rows of a scalar"));
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(&[s[0], rest])?.sum_axis(1)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.sum();
        let grad = self.requires_grad();
        Ok(self.tape.push(Tensor::scalar(s), Op::SumAll(self.id), grad))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(Error::config("mean of an empty tensor"));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.ndim() || start + len > x.shape()[axis] {
            return Err(Error::config(format!(
                "slice [{start}, {}) on axis {axis} out of range for {:?}",
                start + len,
                x.shape()
            )));
        }
        let (outer, total, inner) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s0 = (o * total + start) * inner;
            out.extend_from_slice(&x.data()[s0..s0 + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let grad = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            grad,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        let grad = self.requires_grad();
        Ok(self.tape.push(t, Op::Reshape(self.id), grad))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() < 2 {
            return Err(Error::config("transpose needs at least 2 axes"));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = vec![0.0; x.numel()];
        let d = x.data();
        for b in 0..x.numel() / (m * n).max(1) {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = d[base + i * n + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let grad = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::TransposeLast(self.id),
            grad,
        ))
    }

    /// Repeats size-1 axes up to `shape`; the rank must not change.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let from = x.shape();
        if from.len() != shape.len()
            || from
                .iter()
                .zip(shape)
                .any(|(&a, &b)| a != b && a != 1)
        {
            return Err(Error::config(format!("cannot expand {:?} to {:?}", from, shape)));
        }
        if from == shape {
            return Ok(self);
        }
        let map = expand_index(from, shape);
        let d = x.data();
        let out = map.iter().map(|&i| d[i]).collect();
        let grad = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Expand(self.id),
            grad,
        ))
    }

    /// Broadcasts by the trailing rule: a single value or a shape that is a
    /// suffix of `shape` is repeated over the leading axes.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        if s == shape {
            return Ok(self);
        }
        let n: usize = s.iter().product();
        let padded = if n == 1 {
            vec![1; shape.len()]
        } else if s.len() <= shape.len() && shape.ends_with(&s) {
            let mut p = vec![1; shape.len() - s.len()];
            p.extend_from_slice(&s);
            p
        } else {
            return Err(Error::config(format!("cannot broadcast {s:?} to {shape:?}")));
        };
        self.reshape(&padded)?.expand(shape)
    }

    /// Inserts a size-1 axis at `axis`.
    pub fn unsqueeze(self, axis: usize) -> Result<Var<'t>> {
        let mut s = self.shape();
        if axis > s.len() {
            return Err(Error::config("unsqueeze axis out of range"));
        }
        s.insert(axis, 1);
        self.reshape(&s)
    }

    /// Builds a new last axis where entry `k` copies input entry `index[k]`
    /// (or is zero for `None`).
    pub fn gather_last(self, index: Arc<Vec<Option<usize>>>) -> Result<Var<'t>> {
        let x = self.value();
        let n_in = *x
            .shape()
            .last()
            .ok_or_else(|| Error::config("gather_last of a scalar"))?;
        if index.iter().flatten().any(|&i| i >= n_in) {
            return Err(Error::config("gather_last index out of range"));
        }
        let rows = x.numel() / n_in.max(1);
        let mut out = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            let row = &x.data()[r * n_in..(r + 1) * n_in];
            out.extend(index.iter().map(|i| i.map_or(0.0, |i| row[i])));
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = index.len();
        let grad = self.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Gather { x: self.id, index },
            grad,
        ))
    }

    /// Solves `L x = b` for lower-triangular `self` of shape `(..., S, S)`
    /// and `b` of shape `(..., S)`.
    pub fn tri_solve(self, b: Var<'t>) -> Result<Var<'t>> {
        let l = self.value();
        let bv = b.value();
        let ls = l.shape();
        let bs = bv.shape();
        if ls.len() < 2
            || ls[ls.len() - 1] != ls[ls.len() - 2]
            || bs.len() + 1 != ls.len()
            || ls[..ls.len() - 1] != bs[..]
        {
            return Err(Error::config(format!("tri_solve shapes {ls:?} and {bs:?} do not conform")));
        }
        let s = bs[bs.len() - 1];
        let ld = l.data();
        let bd = bv.data();
        let mut x = vec![0.0; bd.len()];
        for r in 0..bd.len() / s.max(1) {
            let lm = &ld[r * s * s..(r + 1) * s * s];
            for i in 0..s {
                let mut acc = bd[r * s + i];
                for k in 0..i {
                    acc -= lm[i * s + k] * x[r * s + k];
                }
                let d = lm[i * s + i];
                if d == 0.0 {
                    return Err(Error::domain("tri_solve", r * s + i, "zero on the diagonal"));
                }
                x[r * s + i] = acc / d;
            }
        }
        let grad = self.requires_grad() || b.requires_grad();
        Ok(self.tape.push(
            Tensor::from_parts(bs.to_vec(), x),
            Op::TriSolve {
                l: self.id,
                b: b.id,
            },
            grad,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.square().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(&x).item(), 6.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[0.1, -2.0, 3.0, 1.0, 1.0, 0.5]));
        let y = x.softmax().unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap().wrt(&x);
        assert!(g.data().iter().all(|v| v.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn sum_gives_ones_and_detached_leaf_gets_zeros() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1., 2., 3., 4., 5.]));
        let y = tape.leaf(Tensor::from_vec(vec![7.0]));
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(&x).data(), &[1.0; 5]);
        assert_eq!(g.wrt(&y).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(a.add(b), Err(Error::Config(_))));
        assert!(matches!(a.matmul(a), Err(Error::Config(_))));
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]));
        match x.log() {
            Err(Error::Domain { op, index, .. }) => {
                assert_eq!(op, "log");
                assert_eq!(index, 1);
            }
            other => panic!("expected domain error, got {other:?}"),
        }
        let y = tape.leaf(Tensor::from_vec(vec![0.0]));
        assert!(matches!(x.div(y), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn suffix_broadcast_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[4, 3]));
        let b = tape.leaf(Tensor::from_vec(vec![1., 2., 3.]));
        let y = a.mul(b).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(&b).data(), &[4.0, 4.0, 4.0]);
        assert_eq!(g.wrt(&a).data()[..3], [1.0, 2.0, 3.0]);
    }

    #[test]
    fn expand_and_concat_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let e = a.expand(&[2, 3, 2]).unwrap();
        assert_eq!(e.value().data(), &[1., 2., 1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]);
        let c = tape.concat(&[a, a], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 2, 2]);
        let g = tape.backward(e.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(&a).data(), &[3.0; 4]);
    }

    #[test]
    fn tri_solve_inverts_lower_triangular() {
        let tape = Tape::new();
        let l = tape.leaf(t(&[2, 2], &[2.0, 0.0, 1.0, 4.0]));
        let b = tape.leaf(Tensor::from_vec(vec![2.0, 9.0]));
        let x = l.tri_solve(b).unwrap();
        assert_eq!(x.value().data(), &[1.0, 2.0]);
    }

    #[test]
    fn logsumexp_handles_all_negative_infinity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3], f64::NEG_INFINITY));
        assert_eq!(x.logsumexp().unwrap().value().item(), f64::NEG_INFINITY);
    }
}
