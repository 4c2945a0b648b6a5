//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] is rebuilt for every step. Values live in the tape as nodes;
//! [`Var`] is a cheap handle to one node. Nodes are appended in evaluation
//! order, so the node list is always topologically sorted and a backward pass
//! is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tensor::{
    axis_split, broadcast_map, broadcast_shape, matmul_raw, transpose_raw, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub type NodeId = usize;

/// Storage precision for forward values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Forward values are rounded to the nearest `f32` after every op.
    F32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Shift(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    Norm(NodeId),
    NormAxis(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    PickPerRow(NodeId, Vec<usize>),
    Concat(Vec<NodeId>, usize),
    MaskScale(NodeId, Rc<Vec<f64>>),
    Reshape(NodeId),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("precision", &self.precision)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: gradients are collected for it.
    pub fn param(&self, t: Tensor) -> Result<Var<'_>> {
        self.leaf(t, true)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&self, t: Tensor) -> Result<Var<'_>> {
        self.leaf(t, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        check_finite("leaf", t.data())?;
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let (op, requires_grad) = if requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, name: &str, value: Tensor, op: Op, rg: bool) -> Result<Var<'_>> {
        check_finite(name, value.data())?;
        Ok(self.push(value, op, rg))
    }

    /// Concatenate along `axis`. All other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = first.value();
        if axis >= base.shape().len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range"
            )));
        }
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for v in &vals {
            let ok = v.shape().len() == base.shape().len()
                && v.shape()
                    .iter()
                    .zip(base.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total += v.shape()[axis];
        }
        let (outer, _, inner) = axis_split(base.shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base.shape().to_vec();
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        self.record(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat(ids, axis),
            rg,
        )
    }

    /// Reverse sweep from a scalar loss. The tape is left intact so that
    /// several backward passes may share one forward recording.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            // Loss does not depend on any parameter.
            return Ok(Gradients {
                grads: vec![None; nodes.len()],
            });
        }
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            let mut acc = |target: NodeId, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[target].requires_grad {
                    return;
                }
                let slot =
                    grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.numel()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let ma = index_map(y.shape(), av.shape());
                    let mb = index_map(y.shape(), bv.shape());
                    let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
                    let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
                    let (ad, bd) = (av.data(), bv.data());
                    match &node.op {
                        Op::Add(..) => {
                            acc(*a, &mut |s| {
                                g.iter().enumerate().for_each(|(i, gi)| s[ia(i)] += gi)
                            });
                            acc(*b, &mut |s| {
                                g.iter().enumerate().for_each(|(i, gi)| s[ib(i)] += gi)
                            });
                        }
                        Op::Sub(..) => {
                            acc(*a, &mut |s| {
                                g.iter().enumerate().for_each(|(i, gi)| s[ia(i)] += gi)
                            });
                            acc(*b, &mut |s| {
                                g.iter().enumerate().for_each(|(i, gi)| s[ib(i)] -= gi)
                            });
                        }
                        Op::Mul(..) => {
                            acc(*a, &mut |s| {
                                g.iter()
                                    .enumerate()
                                    .for_each(|(i, gi)| s[ia(i)] += gi * bd[ib(i)])
                            });
                            acc(*b, &mut |s| {
                                g.iter()
                                    .enumerate()
                                    .for_each(|(i, gi)| s[ib(i)] += gi * ad[ia(i)])
                            });
                        }
                        _ => {
                            acc(*a, &mut |s| {
                                g.iter()
                                    .enumerate()
                                    .for_each(|(i, gi)| s[ia(i)] += gi / bd[ib(i)])
                            });
                            acc(*b, &mut |s| {
                                g.iter().enumerate().for_each(|(i, gi)| {
                                    let bv = bd[ib(i)];
                                    s[ib(i)] -= gi * ad[ia(i)] / (bv * bv)
                                })
                            });
                        }
                    }
                }
                Op::Neg(a) => acc(*a, &mut |s| zip_add(s, &g, |gi, _| -gi)),
                Op::Scale(a, c) => acc(*a, &mut |s| zip_add(s, &g, |gi, _| gi * c)),
                Op::Shift(a) | Op::Reshape(a) => acc(*a, &mut |s| zip_add(s, &g, |gi, _| gi)),
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    acc(*a, &mut |s| {
                        let bt = transpose_raw(bv.data(), k, n);
                        let d = matmul_raw(&g, &bt, m, n, k);
                        zip_add(s, &d, |x, _| x);
                    });
                    acc(*b, &mut |s| {
                        let at = transpose_raw(av.data(), m, k);
                        let d = matmul_raw(&at, &g, k, m, n);
                        zip_add(s, &d, |x, _| x);
                    });
                }
                Op::Transpose(a) => {
                    let (m, n) = (y.shape()[1], y.shape()[0]);
                    let d = transpose_raw(&g, n, m);
                    acc(*a, &mut |s| zip_add(s, &d, |x, _| x));
                }
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    acc(*a, &mut |s| {
                        for ((si, gi), xi) in s.iter_mut().zip(&g).zip(x.data()) {
                            if *xi > 0.0 {
                                *si += gi;
                            }
                        }
                    });
                }
                Op::Tanh(a) => acc(*a, &mut |s| {
                    zip_add3(s, &g, y.data(), |gi, yi| gi * (1.0 - yi * yi))
                }),
                Op::Exp(a) => acc(*a, &mut |s| zip_add3(s, &g, y.data(), |gi, yi| gi * yi)),
                Op::Sqrt(a) => acc(*a, &mut |s| {
                    zip_add3(s, &g, y.data(), |gi, yi| gi * 0.5 / yi)
                }),
                Op::Log(a) => {
                    let x = &nodes[*a].value;
                    acc(*a, &mut |s| zip_add3(s, &g, x.data(), |gi, xi| gi / xi));
                }
                Op::Softplus(a) => {
                    let x = &nodes[*a].value;
                    acc(*a, &mut |s| {
                        zip_add3(s, &g, x.data(), |gi, xi| gi * sigmoid(xi))
                    });
                }
                Op::Square(a) => {
                    let x = &nodes[*a].value;
                    acc(*a, &mut |s| {
                        zip_add3(s, &g, x.data(), |gi, xi| 2.0 * gi * xi)
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &nodes[*a].value;
                    acc(*a, &mut |s| {
                        zip_add3(
                            s,
                            &g,
                            x.data(),
                            |gi, xi| if xi > *lo && xi < *hi { gi } else { 0.0 },
                        )
                    });
                }
                Op::LogSoftmax(a) => {
                    let c = *y.shape().last().unwrap_or(&1);
                    acc(*a, &mut |s| {
                        for r in 0..g.len() / c {
                            let gr = &g[r * c..(r + 1) * c];
                            let yr = &y.data()[r * c..(r + 1) * c];
                            let gsum: f64 = gr.iter().sum();
                            for j in 0..c {
                                s[r * c + j] += gr[j] - yr[j].exp() * gsum;
                            }
                        }
                    });
                }
                Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
                Op::Mean(a) => {
                    let n = nodes[*a].value.numel() as f64;
                    acc(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n));
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let (outer, len, inner) = axis_split(nodes[*a].value.shape(), *axis);
                    let div = if matches!(node.op, Op::MeanAxis(..)) {
                        len as f64
                    } else {
                        1.0
                    };
                    acc(*a, &mut |s| {
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    s[(o * len + k) * inner + i] += g[o * inner + i] / div;
                                }
                            }
                        }
                    });
                }
                Op::Norm(a) => {
                    let x = &nodes[*a].value;
                    let n = y.data()[0];
                    acc(*a, &mut |s| {
                        zip_add3(s, &[], x.data(), |_, xi| g[0] * xi / n)
                    });
                }
                Op::NormAxis(a, axis) => {
                    let x = &nodes[*a].value;
                    let (outer, len, inner) = axis_split(x.shape(), *axis);
                    acc(*a, &mut |s| {
                        for o in 0..outer {
                            for k in 0..len {
                                for i in 0..inner {
                                    let idx = (o * len + k) * inner + i;
                                    let r = o * inner + i;
                                    s[idx] += g[r] * x.data()[idx] / y.data()[r];
                                }
                            }
                        }
                    });
                }
                Op::GatherRows(a, idx) => {
                    let w = y.numel() / y.rows().max(1);
                    acc(*a, &mut |s| {
                        for (r, &src) in idx.iter().enumerate() {
                            for j in 0..w {
                                s[src * w + j] += g[r * w + j];
                            }
                        }
                    });
                }
                Op::PickPerRow(a, idx) => {
                    let c = nodes[*a].value.cols();
                    acc(*a, &mut |s| {
                        for (r, &j) in idx.iter().enumerate() {
                            s[r * c + j] += g[r];
                        }
                    });
                }
                Op::Concat(ids, axis) => {
                    let (outer, total, inner) = axis_split(y.shape(), *axis);
                    let mut offset = 0;
                    for &p in ids {
                        let len = nodes[p].value.shape()[*axis];
                        acc(p, &mut |s| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                for j in 0..len * inner {
                                    s[dst + j] += g[src + j];
                                }
                            }
                        });
                        offset += len;
                    }
                }
                Op::MaskScale(a, mask) => acc(*a, &mut |s| zip_add3(s, &g, mask, |gi, mi| gi * mi)),
            }
            grads[id] = Some(g);
        }

        let mut out = Vec::with_capacity(nodes.len());
        for (id, g) in grads.into_iter().enumerate() {
            match g {
                Some(g) => {
                    check_finite("backward", &g)?;
                    out.push(Some(Tensor::from_parts(
                        nodes[id].value.shape().to_vec(),
                        g,
                    )));
                }
                None => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn index_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        None
    } else {
        Some(broadcast_map(out, input))
    }
}

fn zip_add(s: &mut [f64], g: &[f64], f: impl Fn(f64, usize) -> f64) {
    for (i, (si, gi)) in s.iter_mut().zip(g).enumerate() {
        *si += f(*gi, i);
    }
}

/// `s[i] += f(g[i], x[i])`; an empty `g` is read as zeros.
fn zip_add3(s: &mut [f64], g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) {
    for i in 0..s.len() {
        let gi = if g.is_empty() { 0.0 } else { g[i] };
        s[i] += f(gi, x[i]);
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

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn unary(&self, name: &str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value();
        self.tape.record(name, v.map(f), op, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let ma = index_map(&shape, a.shape());
        let mb = index_map(&shape, b.shape());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = a.data()[ma.as_ref().map_or(i, |m| m[i])];
                let y = b.data()[mb.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        let rg = self.requires_grad() || other.requires_grad();
        self.tape
            .record(name, Tensor::from_parts(shape, data), op, rg)
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        if other.value().data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary("neg", Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), |x| x * c)
    }

    pub fn shift(&self, c: f64) -> Result<Var<'t>> {
        self.unary("shift", Op::Shift(self.id), |x| x + c)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.record(
            "matmul",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(self.id, other.id),
            rg,
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(Error::InvalidShape {
                shape: a.shape().to_vec(),
                reason: "transpose needs a matrix".into(),
            });
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let t = Tensor::from_parts(vec![n, m], transpose_raw(a.data(), m, n));
        self.tape
            .record("transpose", t, Op::Transpose(self.id), self.requires_grad())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        self.tape
            .record("reshape", t, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn tanh(&self) -> Result<Var<'t>> {
        self.unary("tanh", Op::Tanh(self.id), f64::tanh)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        self.unary("log", Op::Log(self.id), f64::ln)
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", Op::Softplus(self.id), softplus)
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("non-positive argument {bad}"),
            });
        }
        self.unary("sqrt", Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.unary("square", Op::Square(self.id), |x| x * x)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Var<'t>> {
        self.unary("clamp", Op::Clamp(self.id, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Log-softmax over the last axis, computed with the max-shift.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "log-softmax of a scalar".into(),
        })?;
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(c) {
            let (arg, m) =
                row.iter()
                    .copied()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
                    );
            // The max term contributes exactly 1; summing the rest separately
            // keeps log(1 + tiny) accurate.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, v)| (v - m).exp())
                .sum();
            let log_z = rest.ln_1p();
            out.extend(row.iter().map(|v| (v - m) - log_z));
        }
        let t = Tensor::from_parts(x.shape().to_vec(), out);
        self.tape.record(
            "log_softmax",
            t,
            Op::LogSoftmax(self.id),
            self.requires_grad(),
        )
    }

    pub fn softmax(&self) -> Result<Var<'t>> {
        self.log_softmax()?.exp()
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.record(
            "sum",
            Tensor::scalar(s),
            Op::Sum(self.id),
            self.requires_grad(),
        )
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.tape.record(
            "mean",
            Tensor::scalar(s),
            Op::Mean(self.id),
            self.requires_grad(),
        )
    }

    fn reduce_axis(
        &self,
        axis: usize,
        name: &str,
        f: impl Fn(&[f64]) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.shape().len() {
            return Err(Error::InvalidArgument(format!(
                "{name}: axis {axis} out of range"
            )));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = x.data()[(o * len + k) * inner + i];
                }
                out.push(f(&buf));
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        self.tape.record(
            name,
            Tensor::from_parts(shape, out),
            op,
            self.requires_grad(),
        )
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(
            axis,
            "sum_axis",
            |b| b.iter().sum(),
            Op::SumAxis(self.id, axis),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(
            axis,
            "mean_axis",
            |b| b.iter().sum::<f64>() / b.len() as f64,
            Op::MeanAxis(self.id, axis),
        )
    }

    /// Euclidean norm of all entries.
    pub fn norm(&self) -> Result<Var<'t>> {
        let n = self
            .value()
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if n == 0.0 {
            return Err(Error::Domain {
                op: "norm",
                detail: "zero vector".into(),
            });
        }
        self.tape.record(
            "norm",
            Tensor::scalar(n),
            Op::Norm(self.id),
            self.requires_grad(),
        )
    }

    /// Euclidean norm along `axis`, keeping it with length 1.
    pub fn norm_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = self.reduce_axis(
            axis,
            "norm_axis",
            |b| b.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Op::NormAxis(self.id, axis),
        )?;
        if out.value().data().contains(&0.0) {
            return Err(Error::Domain {
                op: "norm",
                detail: "zero-norm slice".into(),
            });
        }
        Ok(out)
    }

    /// Pairwise cosine similarity between the rows of `self` `[n,d]` and
    /// `other` `[m,d]`, giving `[n,m]`.
    pub fn cosine_similarity(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.div(self.norm_axis(1)?)?;
        let b = other.div(other.norm_axis(1)?)?;
        a.matmul(b.transpose()?)
    }

    /// Rows of `self` (first axis) at `idx`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range"
            )));
        }
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather of zero rows".into()));
        }
        let t = x.select_rows(idx);
        self.tape.record(
            "gather_rows",
            t,
            Op::GatherRows(self.id, idx.to_vec()),
            self.requires_grad(),
        )
    }

    /// `out[r] = self[r, idx[r]]` for a matrix.
    pub fn pick_per_row(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.shape().len() != 2 || idx.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "pick_per_row",
                lhs: x.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= x.cols()) {
            return Err(Error::InvalidArgument(format!(
                "column index {bad} out of range"
            )));
        }
        let data = idx.iter().enumerate().map(|(r, &j)| x.get2(r, j)).collect();
        self.tape.record(
            "pick_per_row",
            Tensor::from_parts(vec![idx.len()], data),
            Op::PickPerRow(self.id, idx.to_vec()),
            self.requires_grad(),
        )
    }

    /// Inverted dropout: surviving entries are scaled by `1/(1-p)`.
    pub fn dropout(&self, p: f64, rng: &mut Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        if p == 0.0 {
            return Ok(*self);
        }
        let n = self.value().numel();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.apply_mask(Rc::new(mask))
    }

    /// Multiply element-wise by a fixed mask that carries no gradient.
    pub fn apply_mask(&self, mask: Rc<Vec<f64>>) -> Result<Var<'t>> {
        let x = self.value();
        if mask.len() != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: x.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = x
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(a, m)| a * m)
            .collect();
        let t = Tensor::from_parts(x.shape().to_vec(), data);
        self.tape.record(
            "dropout",
            t,
            Op::MaskScale(self.id, mask),
            self.requires_grad(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![3.0])).unwrap();
        let loss = x.square().unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn independent_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let w = tape.param(Tensor::vector(vec![5.0])).unwrap();
        let loss = x.sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn stable_log_softmax_large_logits() {
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::matrix(1, 2, vec![1000.0, 1000.0]).unwrap())
            .unwrap();
        let y = x.log_softmax().unwrap().value();
        for v in y.data() {
            assert!((v + 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape
            .constant(Tensor::matrix(2, 3, vec![0.3, -2.0, 5.0, 40.0, 41.0, -7.0]).unwrap())
            .unwrap();
        let p = x.softmax().unwrap().value();
        for r in 0..2 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn cosine_self_similarity_is_one() {
        let tape = Tape::new();
        let v = tape
            .constant(Tensor::matrix(1, 3, vec![0.5, -2.0, 7.0]).unwrap())
            .unwrap();
        let s = v.cosine_similarity(v).unwrap().item();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dropout_zero_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0, 3.5])).unwrap();
        let mut rng = seeded(1);
        let y = x.dropout(0.0, &mut rng).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert!(matches!(x.ln(), Err(Error::Domain { .. })));
        let one = tape.constant(Tensor::vector(vec![1.0, 1.0])).unwrap();
        assert!(matches!(one.div(x), Err(Error::Domain { .. })));
        let z = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(z.norm_axis(1).is_err());
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(a.add(b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(a.matmul(a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn overflow_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1000.0])).unwrap();
        assert!(matches!(x.exp(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn f32_precision_rounds_values() {
        let tape = Tape::with_precision(Precision::F32);
        let x = tape.constant(Tensor::vector(vec![0.1])).unwrap();
        let y = x.scale(1.0).unwrap();
        assert_eq!(y.item(), 0.1f32 as f64);
    }
}
