//! Define-then-run differentiation graph.
//!
//! Operations are recorded symbolically; [`Graph::forward`] evaluates every
//! node against a set of named bindings and caches the values, after which
//! [`Graph::backward`] propagates gradients in reverse creation order. Node
//! inputs always precede the node, so the record is acyclic by construction.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, MatMulPlan};
use crate::error::{Error, Result};
use crate::tensor::{numel, DenseArray};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input(String),
    Param(String),
    Const(DenseArray),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Powf(Var, f64),
    Tanh(Var),
    FaultyTanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum { x: Var, axis: isize, keep: bool },
    Mean { x: Var, axis: isize, keep: bool },
    Max { x: Var, axis: isize, keep: bool },
    SumAll(Var),
    Concat(Vec<Var>, isize),
    Slice { x: Var, axis: isize, start: usize, len: usize },
    Reshape(Var, Vec<isize>),
    Broadcast { x: Var, axis: isize, size: usize },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Powf(..) => "powf",
            Op::Tanh(_) => "tanh",
            Op::FaultyTanh(_) => "faulty_tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::SumAll(_) => "sum_all",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Broadcast { .. } => "broadcast",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Neg(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Powf(x, _)
            | Op::Tanh(x)
            | Op::FaultyTanh(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::SumAll(x)
            | Op::Reshape(x, _) => vec![*x],
            Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Max { x, .. }
            | Op::Slice { x, .. }
            | Op::Broadcast { x, .. } => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Option<DenseArray>,
    pub(crate) needs_grad: bool,
}

/// Named arrays bound to graph leaves at evaluation time.
#[derive(Clone, Default)]
pub struct Bindings<'a> {
    map: HashMap<&'a str, &'a DenseArray>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &'a str, value: &'a DenseArray) -> Self {
        self.map.insert(name, value);
        self
    }

    pub fn insert(&mut self, name: &'a str, value: &'a DenseArray) {
        self.map.insert(name, value);
    }

    pub fn bind_store(mut self, store: &'a super::ParamStore) -> Self {
        for (k, v) in store.iter() {
            self.map.insert(k.as_str(), v);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a DenseArray> {
        self.map.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &&'a str> {
        self.map.keys()
    }
}

/// Reverse-mode gradients keyed by node.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: Vec<Option<DenseArray>>,
}

impl GradMap {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// A dynamic differentiation graph over [`DenseArray`]s.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    inputs: BTreeMap<String, Var>,
    evaluated: bool,
}

fn norm_axis(axis: isize, rank: usize) -> Option<usize> {
    let a = if axis < 0 { axis + rank as isize } else { axis };
    (a >= 0 && (a as usize) < rank).then_some(a as usize)
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

    fn push(&mut self, op: Op) -> Var {
        self.evaluated = false;
        let value = match &op {
            Op::Const(a) => Some(a.clone()),
            _ => None,
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Named data input, bound at [`forward`](Self::forward).
    pub fn input(&mut self, name: &str) -> Var {
        if let Some(&v) = self.inputs.get(name) {
            return v;
        }
        let v = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), v);
        v
    }

    /// Named trainable parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.push(Op::Const(value))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(DenseArray::scalar(value))
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn inputs(&self) -> &BTreeMap<String, Var> {
        &self.inputs
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }
    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Var {
        self.push(Op::Transpose(x))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a, b))
    }
    pub fn neg(&mut self, x: Var) -> Var {
        self.push(Op::Neg(x))
    }
    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        self.push(Op::Scale(x, alpha))
    }
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::AddScalar(x, c))
    }
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        self.push(Op::Powf(x, p))
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.push(Op::Tanh(x))
    }
    /// `tanh` whose gradient rule is deliberately wrong. Negative control for
    /// gradient checking only.
    #[doc(hidden)]
    pub fn faulty_tanh(&mut self, x: Var) -> Var {
        self.push(Op::FaultyTanh(x))
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.push(Op::Sigmoid(x))
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.push(Op::Exp(x))
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.push(Op::Log(x))
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.push(Op::Relu(x))
    }
    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.push(Op::Softmax(x))
    }
    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.push(Op::LogSoftmax(x))
    }
    pub fn sum(&mut self, x: Var, axis: isize, keep: bool) -> Var {
        self.push(Op::Sum { x, axis, keep })
    }
    pub fn mean(&mut self, x: Var, axis: isize, keep: bool) -> Var {
        self.push(Op::Mean { x, axis, keep })
    }
    pub fn max(&mut self, x: Var, axis: isize, keep: bool) -> Var {
        self.push(Op::Max { x, axis, keep })
    }
    /// Sum of every entry, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        self.push(Op::SumAll(x))
    }
    pub fn concat(&mut self, xs: &[Var], axis: isize) -> Var {
        self.push(Op::Concat(xs.to_vec(), axis))
    }
    pub fn slice(&mut self, x: Var, axis: isize, start: usize, len: usize) -> Var {
        self.push(Op::Slice { x, axis, start, len })
    }
    /// Reshape; a single `-1` entry is inferred.
    pub fn reshape(&mut self, x: Var, shape: &[isize]) -> Var {
        self.push(Op::Reshape(x, shape.to_vec()))
    }
    /// Repeats a size-1 axis `size` times.
    pub fn broadcast(&mut self, x: Var, axis: isize, size: usize) -> Var {
        self.push(Op::Broadcast { x, axis, size })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    /// Value computed by the last forward pass.
    pub fn value(&self, v: Var) -> &DenseArray {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("graph value requested before forward")
    }

    pub fn try_value(&self, v: Var) -> Option<&DenseArray> {
        self.nodes.get(v.0).and_then(|n| n.value.as_ref())
    }

    pub fn is_evaluated(&self) -> bool {
        self.evaluated
    }

    /// Evaluates every node and returns the value of the terminal (last) node.
    pub fn forward(&mut self, bindings: &Bindings<'_>) -> Result<&DenseArray> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("empty graph".into()));
        }
        for id in 0..self.nodes.len() {
            let (value, needs_grad) = self.eval_node(id, bindings)?;
            let node = &mut self.nodes[id];
            node.value = Some(value);
            node.needs_grad = needs_grad;
        }
        self.evaluated = true;
        Ok(self.value(Var(self.nodes.len() - 1)))
    }

    fn val(&self, v: Var) -> &DenseArray {
        self.nodes[v.0].value.as_ref().expect("inputs precede nodes")
    }

    fn shape_err(&self, id: usize, detail: String) -> Error {
        Error::NodeShape {
            node: id,
            op: self.nodes[id].op.name(),
            detail,
        }
    }

    fn eval_node(&self, id: usize, bindings: &Bindings<'_>) -> Result<(DenseArray, bool)> {
        let op = &self.nodes[id].op;
        let needs_grad = match op {
            Op::Input(_) | Op::Param(_) => true,
            Op::Const(_) => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        let unary = |x: &Var, f: &dyn Fn(f64) -> f64| self.val(*x).map(f);
        let out = match op {
            Op::Input(name) | Op::Param(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnboundInput(name.clone()))?,
            Op::Const(a) => a.clone(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let plan = kernels::plan_matmul(va.shape(), vb.shape())
                    .map_err(|d| self.shape_err(id, d))?;
                let data = kernels::matmul(&plan, va.data(), vb.data());
                DenseArray::from_parts(plan.out_shape, data)
            }
            Op::Transpose(x) => {
                let v = self.val(*x);
                if v.ndim() < 2 {
                    return Err(self.shape_err(id, format!("needs rank >= 2, got {:?}", v.shape())));
                }
                let (s, d) = kernels::transpose_last2(v.shape(), v.data());
                DenseArray::from_parts(s, d)
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let shape = kernels::broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
                    self.shape_err(id, format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()))
                })?;
                match op {
                    Op::Add(..) => kernels::binary(va, vb, shape, |x, y| x + y),
                    Op::Sub(..) => kernels::binary(va, vb, shape, |x, y| x - y),
                    Op::Mul(..) => kernels::binary(va, vb, shape, |x, y| x * y),
                    _ => kernels::binary(va, vb, shape, |x, y| x / y),
                }
            }
            Op::Neg(x) => unary(x, &|v| -v),
            Op::Scale(x, a) => unary(x, &|v| a * v),
            Op::AddScalar(x, c) => unary(x, &|v| v + c),
            Op::Powf(x, p) => unary(x, &|v| v.powf(*p)),
            Op::Tanh(x) | Op::FaultyTanh(x) => unary(x, &f64::tanh),
            Op::Sigmoid(x) => unary(x, &sigmoid),
            Op::Exp(x) => unary(x, &f64::exp),
            Op::Log(x) => unary(x, &f64::ln),
            Op::Relu(x) => unary(x, &|v| v.max(0.0)),
            Op::Softmax(x) | Op::LogSoftmax(x) => {
                let v = self.val(*x);
                if v.ndim() == 0 {
                    return Err(self.shape_err(id, "softmax of a scalar".into()));
                }
                let cols = *v.shape().last().unwrap();
                let data = if matches!(op, Op::Softmax(_)) {
                    kernels::softmax_rows(v.data(), cols)
                } else {
                    kernels::log_softmax_rows(v.data(), cols)
                };
                DenseArray::from_parts(v.shape().to_vec(), data)
            }
            Op::Sum { x, axis, keep } | Op::Mean { x, axis, keep } | Op::Max { x, axis, keep } => {
                let v = self.val(*x);
                let ax = norm_axis(*axis, v.ndim())
                    .ok_or_else(|| self.shape_err(id, format!("axis {axis} out of range for {:?}", v.shape())))?;
                let shape = kernels::reduced_shape(v.shape(), ax, *keep);
                let data = match op {
                    Op::Sum { .. } => kernels::sum_axis(v.shape(), v.data(), ax),
                    Op::Mean { .. } => {
                        let inv = 1.0 / v.shape()[ax] as f64;
                        let mut s = kernels::sum_axis(v.shape(), v.data(), ax);
                        s.iter_mut().for_each(|e| *e *= inv);
                        s
                    }
                    _ => kernels::max_axis(v.shape(), v.data(), ax).0,
                };
                DenseArray::from_parts(shape, data)
            }
            Op::SumAll(x) => DenseArray::scalar(self.val(*x).sum()),
            Op::Concat(xs, axis) => self.eval_concat(id, xs, *axis)?,
            Op::Slice { x, axis, start, len } => {
                let v = self.val(*x);
                let ax = norm_axis(*axis, v.ndim())
                    .ok_or_else(|| self.shape_err(id, format!("axis {axis} out of range for {:?}", v.shape())))?;
                if *len == 0 || start + len > v.shape()[ax] {
                    return Err(self.shape_err(
                        id,
                        format!("slice {start}..{} exceeds axis {ax} of {:?}", start + len, v.shape()),
                    ));
                }
                let (outer, full, inner) = kernels::split_axis(v.shape(), ax);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    data.extend_from_slice(&v.data()[base..base + len * inner]);
                }
                let mut shape = v.shape().to_vec();
                shape[ax] = *len;
                DenseArray::from_parts(shape, data)
            }
            Op::Reshape(x, target) => {
                let v = self.val(*x);
                let shape = infer_shape(target, v.len())
                    .ok_or_else(|| self.shape_err(id, format!("cannot reshape {:?} into {target:?}", v.shape())))?;
                DenseArray::from_parts(shape, v.data().to_vec())
            }
            Op::Broadcast { x, axis, size } => {
                let v = self.val(*x);
                let ax = norm_axis(*axis, v.ndim())
                    .ok_or_else(|| self.shape_err(id, format!("axis {axis} out of range for {:?}", v.shape())))?;
                if v.shape()[ax] != 1 || *size == 0 {
                    return Err(self.shape_err(
                        id,
                        format!("broadcast needs size-1 axis {ax}, got {:?}", v.shape()),
                    ));
                }
                let mut shape = v.shape().to_vec();
                shape[ax] = *size;
                let data = kernels::expand_axis(&shape, v.data(), ax, 1.0);
                DenseArray::from_parts(shape, data)
            }
        };
        Ok((out, needs_grad))
    }

    fn eval_concat(&self, id: usize, xs: &[Var], axis: isize) -> Result<DenseArray> {
        let first = self.val(*xs.first().ok_or_else(|| self.shape_err(id, "no operands".into()))?);
        let ax = norm_axis(axis, first.ndim())
            .ok_or_else(|| self.shape_err(id, format!("axis {axis} out of range for {:?}", first.shape())))?;
        let mut total = 0;
        for x in xs {
            let s = self.val(*x).shape();
            let compatible = s.len() == first.ndim()
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == ax || a == b);
            if !compatible {
                return Err(self.shape_err(id, format!("operand {:?} vs {:?}", s, first.shape())));
            }
            total += s[ax];
        }
        let (outer, _, inner) = kernels::split_axis(first.shape(), ax);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for x in xs {
                let v = self.val(*x);
                let len = v.shape()[ax];
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[ax] = total;
        Ok(DenseArray::from_parts(shape, data))
    }

    /// Gradients of the terminal node seeded with `seed`.
    pub fn backward(&self, seed: &DenseArray) -> Result<GradMap> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward);
        }
        let last = Var(self.nodes.len() - 1);
        self.backward_from(&[(last, seed.clone())])
    }

    /// Gradients of `sum_k <seed_k, value(var_k)>` with respect to every node.
    pub fn backward_from(&self, seeds: &[(Var, DenseArray)]) -> Result<GradMap> {
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        let mut grads: Vec<Option<DenseArray>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, s) in seeds {
            let val = self.val(*v);
            if val.shape() != s.shape() {
                return Err(Error::Shape(format!(
                    "seed shape {:?} does not match output shape {:?} of node {}",
                    s.shape(),
                    val.shape(),
                    v.0
                )));
            }
            accumulate(&mut grads[v.0], s.clone());
            top = top.max(v.0);
        }
        for id in (0..=top).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(GradMap { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, id: usize, g: &DenseArray, grads: &mut [Option<DenseArray>]) -> Result<()> {
        let node = &self.nodes[id];
        let y = node.value.as_ref().expect("evaluated");
        let send = |v: Var, d: DenseArray, grads: &mut [Option<DenseArray>]| {
            accumulate(&mut grads[v.0], d);
        };
        let elementwise = |x: &Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let xv = self.val(*x);
            DenseArray::from_parts(
                xv.shape().to_vec(),
                xv.data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| f(x, y, g))
                    .collect(),
            )
        };
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let plan: MatMulPlan = kernels::plan_matmul(va.shape(), vb.shape())
                    .map_err(|d| self.shape_err(id, d))?;
                let (ga, gb) =
                    kernels::matmul_backward(&plan, va.data(), vb.data(), g.data(), self.wants(*a), self.wants(*b));
                if self.wants(*a) {
                    send(*a, DenseArray::from_parts(va.shape().to_vec(), ga), grads);
                }
                if self.wants(*b) {
                    send(*b, DenseArray::from_parts(vb.shape().to_vec(), gb), grads);
                }
            }
            Op::Transpose(x) => {
                let (s, d) = kernels::transpose_last2(g.shape(), g.data());
                send(*x, DenseArray::from_parts(s, d), grads);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    let va = self.val(*a);
                    send(*a, kernels::reduce_to(g.data(), va.len(), va.shape()), grads);
                }
                if self.wants(*b) {
                    let vb = self.val(*b);
                    let mut d = kernels::reduce_to(g.data(), vb.len(), vb.shape());
                    if sign < 0.0 {
                        d.data_mut().iter_mut().for_each(|e| *e = -*e);
                    }
                    send(*b, d, grads);
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                let div = matches!(node.op, Op::Div(..));
                let n = g.len();
                let (ad, bd, gd) = (va.data(), vb.data(), g.data());
                let (la, lb) = (ad.len(), bd.len());
                if self.wants(*a) {
                    let prod: Vec<f64> = (0..n)
                        .map(|k| if div { gd[k] / bd[k % lb] } else { gd[k] * bd[k % lb] })
                        .collect();
                    send(*a, kernels::reduce_to(&prod, la, va.shape()), grads);
                }
                if self.wants(*b) {
                    let prod: Vec<f64> = (0..n)
                        .map(|k| {
                            let (x, z) = (ad[k % la], bd[k % lb]);
                            if div {
                                -gd[k] * x / (z * z)
                            } else {
                                gd[k] * x
                            }
                        })
                        .collect();
                    send(*b, kernels::reduce_to(&prod, lb, vb.shape()), grads);
                }
            }
            Op::Neg(x) => send(*x, g.scale(-1.0), grads),
            Op::Scale(x, a) => send(*x, g.scale(*a), grads),
            Op::AddScalar(x, _) => send(*x, g.clone(), grads),
            Op::Powf(x, p) => send(*x, elementwise(x, &|x, _, g| g * p * x.powf(p - 1.0)), grads),
            Op::Tanh(x) => send(*x, elementwise(x, &|_, y, g| g * (1.0 - y * y)), grads),
            Op::FaultyTanh(x) => send(*x, elementwise(x, &|_, y, g| g * (1.0 - 0.9 * y * y)), grads),
            Op::Sigmoid(x) => send(*x, elementwise(x, &|_, y, g| g * y * (1.0 - y)), grads),
            Op::Exp(x) => send(*x, elementwise(x, &|_, y, g| g * y), grads),
            Op::Log(x) => send(*x, elementwise(x, &|x, _, g| g / x), grads),
            Op::Relu(x) => send(*x, elementwise(x, &|x, _, g| if x > 0.0 { g } else { 0.0 }), grads),
            Op::Softmax(x) => {
                let cols = *y.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(cols).zip(g.data().chunks(cols)).zip(d.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - dot);
                    }
                }
                send(*x, DenseArray::from_parts(y.shape().to_vec(), d), grads);
            }
            Op::LogSoftmax(x) => {
                let cols = *y.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.data().chunks(cols).zip(g.data().chunks(cols)).zip(d.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, &ly), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = gg - ly.exp() * total;
                    }
                }
                send(*x, DenseArray::from_parts(y.shape().to_vec(), d), grads);
            }
            Op::Sum { x, axis, .. } | Op::Mean { x, axis, .. } => {
                let xv = self.val(*x);
                let ax = norm_axis(*axis, xv.ndim()).expect("validated in forward");
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / xv.shape()[ax] as f64
                } else {
                    1.0
                };
                let d = kernels::expand_axis(xv.shape(), g.data(), ax, scale);
                send(*x, DenseArray::from_parts(xv.shape().to_vec(), d), grads);
            }
            Op::Max { x, axis, .. } => {
                let xv = self.val(*x);
                let ax = norm_axis(*axis, xv.ndim()).expect("validated in forward");
                let (_, arg) = kernels::max_axis(xv.shape(), xv.data(), ax);
                let (outer, len, inner) = kernels::split_axis(xv.shape(), ax);
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        d[(o * len + arg[slot]) * inner + i] = g.data()[slot];
                    }
                }
                send(*x, DenseArray::from_parts(xv.shape().to_vec(), d), grads);
            }
            Op::SumAll(x) => {
                let xv = self.val(*x);
                send(*x, DenseArray::full(xv.shape(), g.item()), grads);
            }
            Op::Concat(xs, axis) => {
                let first = self.val(xs[0]);
                let ax = norm_axis(*axis, first.ndim()).expect("validated in forward");
                let (outer, total, inner) = kernels::split_axis(y.shape(), ax);
                let mut offset = 0;
                for x in xs {
                    let xv = self.val(*x);
                    let len = xv.shape()[ax];
                    if self.wants(*x) {
                        let mut d = Vec::with_capacity(xv.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        send(*x, DenseArray::from_parts(xv.shape().to_vec(), d), grads);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, len } => {
                let xv = self.val(*x);
                let ax = norm_axis(*axis, xv.ndim()).expect("validated in forward");
                let (outer, full, inner) = kernels::split_axis(xv.shape(), ax);
                let mut d = vec![0.0; xv.len()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, DenseArray::from_parts(xv.shape().to_vec(), d), grads);
            }
            Op::Reshape(x, _) => {
                let xv = self.val(*x);
                send(*x, DenseArray::from_parts(xv.shape().to_vec(), g.data().to_vec()), grads);
            }
            Op::Broadcast { x, axis, .. } => {
                let xv = self.val(*x);
                let ax = norm_axis(*axis, xv.ndim()).expect("validated in forward");
                let d = kernels::sum_axis(g.shape(), g.data(), ax);
                send(*x, DenseArray::from_parts(xv.shape().to_vec(), d), grads);
            }
        }
        Ok(())
    }

    /// Gradients of every named parameter, in name order.
    pub fn param_grads(&self, grads: &GradMap) -> BTreeMap<String, DenseArray> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| DenseArray::zeros(self.val(*v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Gradient with respect to a node, zeros when the node is unreachable.
    pub fn grad_or_zeros(&self, grads: &GradMap, v: Var) -> DenseArray {
        grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| DenseArray::zeros(self.val(v).shape()))
    }
}

fn accumulate(slot: &mut Option<DenseArray>, d: DenseArray) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                *a += b;
            }
        }
        None => *slot = Some(d),
    }
}

fn infer_shape(target: &[isize], len: usize) -> Option<Vec<usize>> {
    let unknown = target.iter().filter(|&&d| d < 0).count();
    if unknown > 1 || target.iter().any(|&d| d == 0 || d < -1) {
        return None;
    }
    let known: usize = target.iter().filter(|&&d| d > 0).map(|&d| d as usize).product();
    let shape: Vec<usize> = target
        .iter()
        .map(|&d| if d < 0 { len / known.max(1) } else { d as usize })
        .collect();
    (numel(&shape) == len && shape.iter().all(|&d| d > 0)).then_some(shape)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
