//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends one node to a [`Tape`]; nodes only reference earlier
//! nodes, so the tape order is a topological order of the graph and
//! [`Tape::backward`] is a single reverse sweep. The tape keeps all forward
//! values, so backward can be run again on the same graph and yields the
//! same gradients.

mod conv;
mod elementwise;
mod losses;
mod norm;
mod reshape;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ssm::kernel::ScanSaved;
use crate::tensor::Tensor;

pub use elementwise::{softplus, Unary};
pub use losses::softmax_rows;
pub use norm::NORM_EPS;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { x: Var, w: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Unary { x: Var, kind: Unary },
    WeightedSum { coeffs: Vec<Var>, xs: Vec<Var> },
    Sum { x: Var },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Conv1d { x: Var, k: Var },
    DwConv2d { x: Var, k: Var },
    Gather { x: Var, index: Arc<Vec<usize>> },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    Norm2d { x: Var, inv_std: Vec<f64> },
    Scan(Box<ScanSaved>),
    Mse { pred: Var, target: Tensor },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Recorded computation graph plus gradient buffers.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, what: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(what));
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    ///
    /// Tracked leaves always have a gradient after `backward` (zeros when the
    /// loss does not depend on them). Interior nodes are not retained.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Approximate bytes held by forward values on the tape.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * 8).sum()
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { x, w } => vec![*x, *w],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Unary { x, .. }
            | Op::Sum { x }
            | Op::MeanAxis { x, .. }
            | Op::Gather { x, .. }
            | Op::Reshape { x }
            | Op::Norm2d { x, .. } => vec![*x],
            Op::WeightedSum { coeffs, xs } => coeffs.iter().chain(xs).copied().collect(),
            Op::Conv1d { x, k } | Op::DwConv2d { x, k } => vec![*x, *k],
            Op::Concat { parts } => parts.clone(),
            Op::Scan(s) => s.inputs(),
            Op::Mse { pred, .. } => vec![*pred],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Previous gradients are discarded. Afterwards every tracked leaf holds
    /// d(loss)/d(leaf).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", n.value.shape())));
        }
        if !n.requires_grad {
            return Err(Error::Backward("loss does not depend on any tracked tensor".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(n.value.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if self.grads[i].is_none() {
                    self.grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g)?;
            for (v, gv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&gv)?,
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        // leaves created before nothing reached them
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { x, w } => elementwise::matmul_backward(val(x), val(w), g, wants(x), wants(w))
                .into_iter()
                .zip([*x, *w])
                .filter_map(|(t, v)| t.map(|t| (v, t)))
                .collect(),
            Op::Add { a, b } => {
                let mut out = vec![(*a, g.clone())];
                if wants(b) {
                    out.push((*b, elementwise::reduce_to_suffix(g, val(b).shape())?));
                }
                out
            }
            Op::Mul { a, b } => {
                let (ga, gb) = elementwise::mul_backward(val(a), val(b), g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale { x, c } => vec![(*x, g.map(|v| v * c))],
            Op::Unary { x, kind } => vec![(*x, kind.backward(val(x), &node.value, g))],
            Op::WeightedSum { coeffs, xs } => {
                let mut out = Vec::with_capacity(coeffs.len() * 2);
                for (c, x) in coeffs.iter().zip(xs) {
                    let cv = val(c).data()[0];
                    if wants(x) {
                        out.push((*x, g.map(|v| v * cv)));
                    }
                    if wants(c) {
                        let dot: f64 = g.data().iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                        out.push((*c, Tensor::new(val(c).shape().to_vec(), vec![dot])?));
                    }
                }
                out
            }
            Op::Sum { x } => vec![(*x, Tensor::full(val(x).shape().to_vec(), g.data()[0]))],
            Op::MeanAxis { x, outer, len, inner } => {
                vec![(*x, reshape::mean_axis_backward(val(x).shape(), g, *outer, *len, *inner))]
            }
            Op::Conv1d { x, k } => {
                let (gx, gk) = conv::conv1d_backward(val(x), val(k), g);
                vec![(*x, gx), (*k, gk)]
            }
            Op::DwConv2d { x, k } => {
                let (gx, gk) = conv::dwconv2d_backward(val(x), val(k), g);
                vec![(*x, gx), (*k, gk)]
            }
            Op::Gather { x, index } => vec![(*x, reshape::gather_backward(val(x).shape(), index, g))],
            Op::Concat { parts } => {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| val(p).shape()).collect();
                parts.iter().copied().zip(reshape::concat_backward(&shapes, g)).collect()
            }
            Op::Reshape { x } => vec![(*x, g.clone().reshape(val(x).shape().to_vec())?)],
            Op::Norm2d { x, inv_std } => vec![(*x, norm::norm2d_backward(&node.value, inv_std, g))],
            Op::Scan(saved) => saved.backward(self, g)?,
            Op::Mse { pred, target } => vec![(*pred, losses::mse_backward(val(pred), target, g))],
            Op::CrossEntropy { logits, labels, probs } => {
                vec![(*logits, losses::cross_entropy_backward(probs, labels, g))]
            }
        })
    }
}
