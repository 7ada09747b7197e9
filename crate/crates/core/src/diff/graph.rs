//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends one
//! node, so node ids are already a topological order and backward is a single
//! reverse sweep. Operations whose inputs are all constants produce constants
//! and are not recorded for backward.

use std::cell::{Cell, RefCell};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// The operation kinds the tape understands.
///
/// Binary elementwise kinds accept equal shapes, or a one-element operand on
/// either side; nothing else broadcasts.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    /// `[m,k]·[k,n]`, `[m,k]·[k]` or `[k]·[k,n]`.
    MatMul,
    /// Concatenation along the leading axis.
    Concat,
    /// `len` leading-axis rows starting at `start`.
    Slice {
        start: usize,
        len: usize,
    },
    Sigmoid,
    Tanh,
    Exp,
    Log,
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    Sum,
    Mean,
    Scale(f64),
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Scale(_) => "scale",
        }
    }
}

struct Record {
    kind: OpKind,
    inputs: Vec<NodeId>,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    record: Option<Record>,
}

thread_local! {
    static CORRUPT_SOFTMAX_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with a deliberately wrong softmax backward rule on this thread.
///
/// Exists so the verification harness can prove it catches a broken rule.
#[doc(hidden)]
pub fn with_corrupted_softmax_backward<R>(f: impl FnOnce() -> R) -> R {
    CORRUPT_SOFTMAX_BACKWARD.with(|c| c.set(true));
    let out = f();
    CORRUPT_SOFTMAX_BACKWARD.with(|c| c.set(false));
    out
}

#[doc(hidden)]
pub fn set_corrupted_softmax_backward(on: bool) {
    CORRUPT_SOFTMAX_BACKWARD.with(|c| c.set(on));
}

/// A reverse-mode tape owned by one thread for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            record: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Input ids of the record that produced `id`, if it was recorded.
    pub fn inputs_of(&self, id: NodeId) -> Option<Vec<NodeId>> {
        self.nodes.borrow()[id].record.as_ref().map(|r| r.inputs.clone())
    }

    /// Evaluates `kind` on `inputs`, recording it when any input requires gradient.
    pub fn apply<'g>(&'g self, kind: OpKind, inputs: &[Var<'g>]) -> Result<Var<'g>> {
        for v in inputs {
            if !std::ptr::eq(v.graph, self) {
                return Err(Error::Contract("input belongs to a different graph".into()));
            }
        }
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            let value = forward(&kind, &vals)?;
            if !value.is_finite() {
                return Err(Error::NonFinite(kind.name()));
            }
            (value, inputs.iter().any(|v| nodes[v.id].requires_grad))
        };
        let record = requires_grad.then(|| Record {
            kind,
            inputs: inputs.iter().map(|v| v.id).collect(),
        });
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        self.apply(OpKind::Concat, parts)
    }

    /// Populates gradients of every reachable node that requires them.
    ///
    /// Gradients from earlier calls are discarded.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Err(Error::Contract("backward root does not require grad".into()));
        }
        let corrupt = CORRUPT_SOFTMAX_BACKWARD.with(|c| c.get());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            let Some(record) = nodes[id].record.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let input_vals: Vec<&Tensor> = record.inputs.iter().map(|&i| &nodes[i].value).collect();
            let contribs = backward_rule(&record.kind, &input_vals, &nodes[id].value, &g, corrupt);
            for (&input, contrib) in record.inputs.iter().zip(contribs) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    fn value_of(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_of(&self, id: NodeId) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[id];
        if !node.requires_grad {
            return None;
        }
        self.grads
            .borrow()
            .get(id)
            .and_then(|g| g.clone())
            .map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
    }
}

// fallible, so these cannot be the operator traits
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id)
    }

    /// Reads the value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient from the last [`Graph::backward`], or `None` if it was not reached.
    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad_of(self.id)
    }

    /// A constant copy of this value; gradients stop here.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value())
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Add, &[self, rhs])
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Sub, &[self, rhs])
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Mul, &[self, rhs])
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph.apply(OpKind::MatMul, &[self, rhs])
    }

    pub fn slice(self, start: usize, len: usize) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Slice { start, len }, &[self])
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Sigmoid, &[self])
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Tanh, &[self])
    }

    pub fn exp(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Exp, &[self])
    }

    pub fn log(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Log, &[self])
    }

    pub fn softmax(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Softmax, &[self])
    }

    pub fn log_softmax(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::LogSoftmax, &[self])
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Sum, &[self])
    }

    pub fn mean(self) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Mean, &[self])
    }

    pub fn scale(self, factor: f64) -> Result<Var<'g>> {
        self.graph.apply(OpKind::Scale(factor), &[self])
    }
}

fn binary_shape(kind: &OpKind, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::Dimension(format!(
            "{}: shapes {:?} and {:?} do not match",
            kind.name(),
            a.shape(),
            b.shape()
        )))
    }
}

fn elementwise(kind: &OpKind, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = binary_shape(kind, a, b)?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
    let data = (0..n).map(|i| f(pick(ad, i), pick(bd, i))).collect();
    Tensor::new(shape, data)
}

fn unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn last_axis(t: &Tensor) -> usize {
    *t.shape().last().expect("non-empty shape")
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let cols = last_axis(t);
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

fn log_softmax_rows(t: &Tensor) -> Tensor {
    let cols = last_axis(t);
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let err = || {
        Error::Dimension(format!(
            "matmul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        ))
    };
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n, vec![*m, *n])),
        ([m, k], [k2]) if k == k2 => Ok((*m, *k, 1, vec![*m])),
        ([k], [k2, n]) if k == k2 => Ok((1, *k, *n, vec![*n])),
        _ => Err(err()),
    }
}

/// `out[m,n] = a[m,k] · b[k,n]` on flat row-major buffers.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MatMul => Some(2),
        OpKind::Concat => None,
        _ => Some(1),
    };
    if let Some(n) = arity {
        if inputs.len() != n {
            return Err(Error::Contract(format!(
                "{} takes {n} inputs, got {}",
                kind.name(),
                inputs.len()
            )));
        }
    }
    match kind {
        OpKind::Add => elementwise(kind, inputs[0], inputs[1], |a, b| a + b),
        OpKind::Sub => elementwise(kind, inputs[0], inputs[1], |a, b| a - b),
        OpKind::Mul => elementwise(kind, inputs[0], inputs[1], |a, b| a * b),
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n, shape) = matmul_dims(a, b)?;
            Tensor::new(shape, gemm(a.data(), b.data(), m, k, n))
        }
        OpKind::Concat => {
            let first = inputs
                .first()
                .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
            let tail = &first.shape()[1..];
            let mut lead = 0;
            let mut data = Vec::new();
            for t in inputs {
                if &t.shape()[1..] != tail {
                    return Err(Error::Dimension(format!(
                        "concat: trailing shape {:?} differs from {:?}",
                        &t.shape()[1..],
                        tail
                    )));
                }
                lead += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![lead];
            shape.extend_from_slice(tail);
            Tensor::new(shape, data)
        }
        OpKind::Slice { start, len } => {
            let t = inputs[0];
            let lead = t.shape()[0];
            if *len == 0 || start + len > lead {
                return Err(Error::Dimension(format!(
                    "slice {start}..{} out of range for leading extent {lead}",
                    start + len
                )));
            }
            let row: usize = t.shape()[1..].iter().product();
            let mut shape = t.shape().to_vec();
            shape[0] = *len;
            Tensor::new(shape, t.data()[start * row..(start + len) * row].to_vec())
        }
        OpKind::Sigmoid => Ok(unary(inputs[0], sigmoid)),
        OpKind::Tanh => Ok(unary(inputs[0], f64::tanh)),
        OpKind::Exp => Ok(unary(inputs[0], f64::exp)),
        OpKind::Log => {
            if let Some(bad) = inputs[0].data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
            Ok(unary(inputs[0], f64::ln))
        }
        OpKind::Softmax => Ok(softmax_rows(inputs[0])),
        OpKind::LogSoftmax => Ok(log_softmax_rows(inputs[0])),
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        OpKind::Mean => Ok(Tensor::scalar(
            inputs[0].data().iter().sum::<f64>() / inputs[0].numel() as f64,
        )),
        OpKind::Scale(c) => Ok(unary(inputs[0], |x| c * x)),
    }
}

/// Gradient of an operand that may have been broadcast from one element.
fn reduce_to(input: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if input.numel() == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn backward_rule(kind: &OpKind, inputs: &[&Tensor], out: &Tensor, g: &[f64], corrupt_softmax: bool) -> Vec<Vec<f64>> {
    let n = g.len();
    let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
    match kind {
        OpKind::Add => vec![reduce_to(inputs[0], g.to_vec()), reduce_to(inputs[1], g.to_vec())],
        OpKind::Sub => vec![
            reduce_to(inputs[0], g.to_vec()),
            reduce_to(inputs[1], g.iter().map(|v| -v).collect()),
        ],
        OpKind::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let ga = (0..n).map(|i| g[i] * pick(b, i)).collect();
            let gb = (0..n).map(|i| g[i] * pick(a, i)).collect();
            vec![reduce_to(inputs[0], ga), reduce_to(inputs[1], gb)]
        }
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, nn, _) = matmul_dims(a, b).expect("validated in forward");
            // ga[m,k] = g[m,n]·bᵀ, gb[k,n] = aᵀ·g[m,n]
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let brow = &b.data()[p * nn..(p + 1) * nn];
                    let grow = &g[i * nn..(i + 1) * nn];
                    ga[i * k + p] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                }
            }
            let mut gb = vec![0.0; k * nn];
            for i in 0..m {
                let grow = &g[i * nn..(i + 1) * nn];
                for p in 0..k {
                    let av = a.data()[i * k + p];
                    for (o, &gv) in gb[p * nn..(p + 1) * nn].iter_mut().zip(grow) {
                        *o += av * gv;
                    }
                }
            }
            vec![ga, gb]
        }
        OpKind::Concat => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let part = g[offset..offset + t.numel()].to_vec();
                    offset += t.numel();
                    part
                })
                .collect()
        }
        OpKind::Slice { start, .. } => {
            let t = inputs[0];
            let row: usize = t.shape()[1..].iter().product();
            let mut ga = vec![0.0; t.numel()];
            ga[start * row..start * row + n].copy_from_slice(g);
            vec![ga]
        }
        OpKind::Sigmoid => vec![out.data().iter().zip(g).map(|(y, gv)| gv * y * (1.0 - y)).collect()],
        OpKind::Tanh => vec![out.data().iter().zip(g).map(|(y, gv)| gv * (1.0 - y * y)).collect()],
        OpKind::Exp => vec![out.data().iter().zip(g).map(|(y, gv)| gv * y).collect()],
        OpKind::Log => vec![inputs[0].data().iter().zip(g).map(|(x, gv)| gv / x).collect()],
        OpKind::Softmax => {
            let cols = last_axis(out);
            let mut ga = vec![0.0; n];
            for ((gx, y), gy) in ga.chunks_mut(cols).zip(out.data().chunks(cols)).zip(g.chunks(cols)) {
                let dot: f64 = if corrupt_softmax {
                    0.0
                } else {
                    y.iter().zip(gy).map(|(a, b)| a * b).sum()
                };
                for i in 0..cols {
                    gx[i] = y[i] * (gy[i] - dot);
                }
            }
            vec![ga]
        }
        OpKind::LogSoftmax => {
            let cols = last_axis(out);
            let mut ga = vec![0.0; n];
            for ((gx, y), gy) in ga.chunks_mut(cols).zip(out.data().chunks(cols)).zip(g.chunks(cols)) {
                let total: f64 = gy.iter().sum();
                for i in 0..cols {
                    gx[i] = gy[i] - y[i].exp() * total;
                }
            }
            vec![ga]
        }
        OpKind::Sum => vec![vec![g[0]; inputs[0].numel()]],
        OpKind::Mean => {
            let m = inputs[0].numel();
            vec![vec![g[0] / m as f64; m]]
        }
        OpKind::Scale(c) => vec![g.iter().map(|v| c * v).collect()],
    }
}
