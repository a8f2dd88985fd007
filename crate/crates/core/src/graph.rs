//! Eager reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only arena: every op evaluates immediately and
//! records a node whose inputs are earlier nodes, so insertion order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Shape rules per op:
//!
//! | op            | inputs                              | output   |
//! |---------------|-------------------------------------|----------|
//! | matmul        | `[m,k]`, `[k,n]`                    | `[m,n]`  |
//! | add           | equal shapes, or `[m,n]` + `[n]`    | lhs      |
//! | mul           | equal shapes, or any + one-element  | lhs      |
//! | relu, tanh    | any                                 | same     |
//! | concat        | equal extents off the concat axis   | joined   |
//! | mean, sum     | any                                 | scalar   |
//! | embed_lookup  | table `[v,d]`, indices `[m]`        | `[m,d]`  |
//! | softmax_xent  | logits `[m,k]`, classes `[m]`       | scalar   |
//! | mse           | equal shapes                        | scalar   |
//!
//! Index-valued inputs (embedding indices, class labels) must hold
//! non-negative integers and never receive gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Matmul,
    Add,
    Mul,
    Relu,
    Tanh,
    Concat,
    Mean,
    Sum,
    EmbedLookup,
    SoftmaxXent,
    Mse,
}

impl OpKind {
    pub const ALL: [OpKind; 11] = [
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Concat,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::EmbedLookup,
        OpKind::SoftmaxXent,
        OpKind::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Concat => "concat",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::EmbedLookup => "embed_lookup",
            OpKind::SoftmaxXent => "softmax_xent",
            OpKind::Mse => "mse",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(String::from(s)))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add { lhs: NodeId, rhs: NodeId, bias: bool },
    Mul { lhs: NodeId, rhs: NodeId, scalar: bool },
    Relu(NodeId),
    Tanh(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Mean(NodeId),
    Sum(NodeId),
    EmbedLookup { table: NodeId, indices: NodeId },
    SoftmaxXent { logits: NodeId, classes: NodeId },
    Mse { pred: NodeId, target: NodeId },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Concat { .. } => OpKind::Concat,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::EmbedLookup { .. } => OpKind::EmbedLookup,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::Mse { .. } => OpKind::Mse,
        })
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) => vec![*a, *b],
            Op::Add { lhs, rhs, .. } | Op::Mul { lhs, rhs, .. } => vec![*lhs, *rhs],
            Op::Relu(a) | Op::Tanh(a) | Op::Mean(a) | Op::Sum(a) => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::EmbedLookup { table, indices } => vec![*table, *indices],
            Op::SoftmaxXent { logits, classes } => vec![*logits, *classes],
            Op::Mse { pred, target } => vec![*pred, *target],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
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

    /// Negates every gradient contribution flowing out of `kind` nodes.
    ///
    /// Only meant for exercising gradient-check failure paths.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    /// Leaf that never receives gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf that receives gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    pub fn kind(&self, id: NodeId) -> Option<OpKind> {
        self.nodes[id.0].op.kind()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Ids of leaves that require gradient, in creation order.
    pub fn trainable_leaves(&self) -> Vec<NodeId> {
        self.node_ids().filter(|&id| self.is_leaf(id) && self.requires_grad(id)).collect()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    /// Generic entry point; `concat` joins along the last axis.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Shape {
                    op: kind.name(),
                    detail: format!("expected {n} inputs, got {}", inputs.len()),
                })
            }
        };
        match kind {
            OpKind::Matmul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Concat => {
                let axis = inputs
                    .first()
                    .map(|&i| self.value(i).ndim().saturating_sub(1))
                    .unwrap_or(0);
                self.concat(inputs, axis)
            }
            OpKind::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            OpKind::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
            OpKind::EmbedLookup => {
                arity(2)?;
                self.embed_lookup(inputs[0], inputs[1])
            }
            OpKind::SoftmaxXent => {
                arity(2)?;
                self.softmax_xent(inputs[0], inputs[1])
            }
            OpKind::Mse => {
                arity(2)?;
                self.mse(inputs[0], inputs[1])
            }
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Matmul(a, b))
    }

    /// Elementwise add; a rank-1 `rhs` is broadcast over the rows of a rank-2 `lhs`.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (ls, rs) = (self.value(lhs).shape(), self.value(rhs).shape());
        let bias = ls != rs && ls.len() == 2 && rs.len() == 1 && ls[1] == rs[0];
        self.record(Op::Add { lhs, rhs, bias })
    }

    /// Elementwise multiply; a one-element `rhs` scales every entry of `lhs`.
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let scalar = self.value(lhs).shape() != self.value(rhs).shape() && self.value(rhs).is_scalar();
        self.record(Op::Mul { lhs, rhs, scalar })
    }

    /// Multiplies by a constant that does not take part in differentiation.
    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let c = self.input(Tensor::scalar(factor));
        self.mul(x, c)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh(x))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.record(Op::Concat { inputs: inputs.to_vec(), axis })
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Mean(x))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(x))
    }

    pub fn embed_lookup(&mut self, table: NodeId, indices: NodeId) -> Result<NodeId> {
        self.record(Op::EmbedLookup { table, indices })
    }

    /// Mean cross-entropy of row-wise softmax against integer classes.
    pub fn softmax_xent(&mut self, logits: NodeId, classes: NodeId) -> Result<NodeId> {
        self.record(Op::SoftmaxXent { logits, classes })
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.record(Op::Mse { pred, target })
    }

    /// Replaces a leaf's value. Call [`Graph::recompute`] to refresh dependents.
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) || node.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_leaf",
                detail: format!("node {} is not a leaf of shape {:?}", id.0, value.shape()),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in insertion order.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.eval(&op)?;
        }
        Ok(())
    }

    fn shape_err(op: OpKind, detail: String) -> Error {
        Error::Shape { op: op.name(), detail }
    }

    fn indices_of(&self, id: NodeId, bound: usize, what: &'static str) -> Result<Vec<usize>> {
        let t = self.value(id);
        t.data()
            .iter()
            .map(|&v| {
                if v < 0.0 || libm::trunc(v) != v || !v.is_finite() {
                    return Err(Error::Shape {
                        op: what,
                        detail: format!("index value {v} is not a non-negative integer"),
                    });
                }
                let i = v as usize;
                if i >= bound {
                    return Err(Error::OutOfRange { what, index: i, len: bound });
                }
                Ok(i)
            })
            .collect()
    }

    fn eval(&self, op: &Op) -> Result<Tensor> {
        match op {
            Op::Leaf => unreachable!("leaves are never evaluated"),
            Op::Matmul(a, b) => {
                let (a, b) = (self.value(*a), self.value(*b));
                if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Self::shape_err(
                        OpKind::Matmul,
                        format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))
            }
            Op::Add { lhs, rhs, bias } => {
                let (a, b) = (self.value(*lhs), self.value(*rhs));
                if *bias {
                    let n = b.numel();
                    let mut out = a.clone();
                    for row in out.data_mut().chunks_mut(n) {
                        for (o, &v) in row.iter_mut().zip(b.data()) {
                            *o += v;
                        }
                    }
                    Ok(out)
                } else if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                    Tensor::new(a.shape(), data)
                } else {
                    Err(Self::shape_err(
                        OpKind::Add,
                        format!("cannot add {:?} and {:?}", a.shape(), b.shape()),
                    ))
                }
            }
            Op::Mul { lhs, rhs, scalar } => {
                let (a, b) = (self.value(*lhs), self.value(*rhs));
                if *scalar {
                    let c = b.item();
                    Ok(a.map(|v| v * c))
                } else if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(a.shape(), data)
                } else {
                    Err(Self::shape_err(
                        OpKind::Mul,
                        format!("cannot multiply {:?} and {:?}", a.shape(), b.shape()),
                    ))
                }
            }
            Op::Relu(x) => Ok(self.value(*x).map(|v| if v > 0.0 { v } else { 0.0 })),
            Op::Tanh(x) => Ok(self.value(*x).map(libm::tanh)),
            Op::Concat { inputs, axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                Tensor::concat(&parts, *axis)
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                Ok(Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64))
            }
            Op::Sum(x) => Ok(Tensor::scalar(self.value(*x).data().iter().sum())),
            Op::EmbedLookup { table, indices } => {
                let t = self.value(*table);
                if t.ndim() != 2 || self.value(*indices).ndim() != 1 {
                    return Err(Self::shape_err(
                        OpKind::EmbedLookup,
                        format!(
                            "table {:?} must be rank 2 and indices {:?} rank 1",
                            t.shape(),
                            self.value(*indices).shape()
                        ),
                    ));
                }
                let idx = self.indices_of(*indices, t.shape()[0], "embed_lookup")?;
                Ok(t.select_rows(&idx))
            }
            Op::SoftmaxXent { logits, classes } => {
                let l = self.value(*logits);
                let c = self.value(*classes);
                if l.ndim() != 2 || c.ndim() != 1 || c.numel() != l.shape()[0] {
                    return Err(Self::shape_err(
                        OpKind::SoftmaxXent,
                        format!("logits {:?} vs classes {:?}", l.shape(), c.shape()),
                    ));
                }
                let k = l.shape()[1];
                let classes = self.indices_of(*classes, k, "softmax_xent")?;
                let mut total = 0.0;
                for (row, &y) in l.data().chunks(k).zip(&classes) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
                    total += lse - row[y];
                }
                Ok(Tensor::scalar(total / classes.len() as f64))
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                if p.shape() != t.shape() {
                    return Err(Self::shape_err(
                        OpKind::Mse,
                        format!("prediction {:?} vs target {:?}", p.shape(), t.shape()),
                    ));
                }
                let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok(Tensor::scalar(s / p.numel() as f64))
            }
        }
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[i].take() else { continue };
            let sign = if node.op.kind() == self.fault { -1.0 } else { 1.0 };
            let contributions = self.local_grads(&node.op, &node.value, &upstream);
            for (input, mut g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if sign < 0.0 {
                    g = g.map(|v| -v);
                }
                accumulate(&mut grads[input.0], g);
            }
        }

        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                out[i] = Some(grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape())));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn local_grads(&self, op: &Op, out: &Tensor, up: &Tensor) -> Vec<(NodeId, Tensor)> {
        let needs = |id: &NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut v = Vec::with_capacity(2);
                if needs(a) {
                    let g = matmul_a_bt(up.data(), bv.data(), m, n, k);
                    v.push((*a, Tensor::new(&[m, k], g).expect("matmul lhs grad")));
                }
                if needs(b) {
                    let g = matmul_at_b(av.data(), up.data(), m, k, n);
                    v.push((*b, Tensor::new(&[k, n], g).expect("matmul rhs grad")));
                }
                v
            }
            Op::Add { lhs, rhs, bias } => {
                let mut v = vec![(*lhs, up.clone())];
                if needs(rhs) {
                    if *bias {
                        let n = self.value(*rhs).numel();
                        let mut g = vec![0.0; n];
                        for row in up.data().chunks(n) {
                            for (o, &x) in g.iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                        v.push((*rhs, Tensor::new(self.value(*rhs).shape(), g).expect("bias grad")));
                    } else {
                        v.push((*rhs, up.clone()));
                    }
                }
                v
            }
            Op::Mul { lhs, rhs, scalar } => {
                let (a, b) = (self.value(*lhs), self.value(*rhs));
                let mut v = Vec::with_capacity(2);
                if *scalar {
                    let c = b.item();
                    v.push((*lhs, up.map(|x| x * c)));
                    if needs(rhs) {
                        let s: f64 = up.data().iter().zip(a.data()).map(|(u, x)| u * x).sum();
                        v.push((*rhs, Tensor::full(b.shape(), s)));
                    }
                } else {
                    let ga = up.data().iter().zip(b.data()).map(|(u, x)| u * x).collect();
                    v.push((*lhs, Tensor::new(a.shape(), ga).expect("mul lhs grad")));
                    if needs(rhs) {
                        let gb = up.data().iter().zip(a.data()).map(|(u, x)| u * x).collect();
                        v.push((*rhs, Tensor::new(b.shape(), gb).expect("mul rhs grad")));
                    }
                }
                v
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let g = up
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(u, &v)| if v > 0.0 { *u } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::new(xv.shape(), g).expect("relu grad"))]
            }
            Op::Tanh(x) => {
                let g = up.data().iter().zip(out.data()).map(|(u, y)| u * (1.0 - y * y)).collect();
                vec![(*x, Tensor::new(out.shape(), g).expect("tanh grad"))]
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[*axis] * inner;
                let mut offset = 0;
                let mut v = Vec::with_capacity(inputs.len());
                for id in inputs {
                    let s = self.value(*id).shape();
                    let w = s[*axis] * inner;
                    if needs(id) {
                        let mut g = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            g.extend_from_slice(&up.data()[o * full + offset..o * full + offset + w]);
                        }
                        v.push((*id, Tensor::new(s, g).expect("concat grad")));
                    }
                    offset += w;
                }
                v
            }
            Op::Mean(x) => {
                let s = self.value(*x).shape();
                let n: usize = s.iter().product();
                vec![(*x, Tensor::full(s, up.item() / n as f64))]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), up.item()))],
            Op::EmbedLookup { table, indices } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let idx = self
                    .indices_of(*indices, t.shape()[0], "embed_lookup")
                    .expect("validated in forward");
                let mut g = Tensor::zeros(t.shape());
                for (row, &i) in up.data().chunks(d).zip(&idx) {
                    for (o, &u) in g.data_mut()[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *o += u;
                    }
                }
                vec![(*table, g)]
            }
            Op::SoftmaxXent { logits, classes } => {
                let l = self.value(*logits);
                let k = l.shape()[1];
                let m = l.shape()[0];
                let cls = self.indices_of(*classes, k, "softmax_xent").expect("validated in forward");
                let scale = up.item() / m as f64;
                let mut g = Vec::with_capacity(l.numel());
                for (row, &y) in l.data().chunks(k).zip(&cls) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| libm::exp(v - max)).collect();
                    let z: f64 = exps.iter().sum();
                    for (j, e) in exps.iter().enumerate() {
                        let p = e / z;
                        g.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                    }
                }
                vec![(*logits, Tensor::new(l.shape(), g).expect("xent grad"))]
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = 2.0 * up.item() / p.numel() as f64;
                let gp: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| scale * (a - b)).collect();
                let mut v = Vec::with_capacity(2);
                if needs(target) {
                    v.push((*target, Tensor::new(t.shape(), gp.iter().map(|x| -x).collect()).expect("mse grad")));
                }
                v.push((*pred, Tensor::new(p.shape(), gp).expect("mse grad")));
                v
            }
        }
    }

    /// Inputs of a non-leaf node.
    pub fn inputs_of(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.inputs()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for nodes that are not trainable leaves.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (NodeId(i), g)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    #[test]
    fn relu_clamps_negatives_and_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let i = g.input(Tensor::identity(3));
        let m = Tensor::matrix(3, 4, (0..12).map(|v| v as f64 * 0.37 - 2.0).collect()).unwrap();
        let x = g.input(m.clone());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &m);
    }

    #[test]
    fn mse_of_single_point() {
        let mut g = Graph::new();
        let p = g.input(Tensor::vector(vec![3.0]));
        let t = g.input(Tensor::vector(vec![1.0]));
        let l = g.mse(p, t).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.input(Tensor::vector(vec![5.0, 6.0]));
        let l = g.sum(c).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(g.backward(x).unwrap_err(), Error::NonScalarLoss(vec![2]));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.starts_with("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
        let c = g.input(Tensor::zeros(&[3, 2]));
        assert!(g.concat(&[a, c], 1).unwrap_err().to_string().contains("concat"));
    }

    #[test]
    fn unknown_op_kind_is_rejected() {
        assert_eq!("conv2d".parse::<OpKind>().unwrap_err(), Error::UnknownOp("conv2d".into()));
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn bias_add_broadcasts_over_rows() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.param(Tensor::vector(vec![10.0, 20.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn embed_lookup_rejects_bad_indices() {
        let mut g = Graph::new();
        let t = g.param(Tensor::zeros(&[3, 2]));
        let bad = g.input(Tensor::vector(vec![3.0]));
        assert!(matches!(g.embed_lookup(t, bad), Err(Error::OutOfRange { .. })));
        let frac = g.input(Tensor::vector(vec![0.5]));
        assert!(g.embed_lookup(t, frac).is_err());
    }

    #[test]
    fn recompute_tracks_leaf_updates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        let s = g.sum(y).unwrap();
        let before = g.value(s).item();
        g.set_leaf(x, Tensor::vector(vec![0.0, 0.0])).unwrap();
        g.recompute().unwrap();
        assert_eq!(g.value(s).item(), 0.0);
        assert!(before > 0.0);
    }
}
