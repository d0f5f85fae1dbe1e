//! Define-by-run tape.
//!
//! Every op appends a node holding its output value and an [`Op`] record
//! (input ids plus whatever the backward rule needs). Node ids are assigned in
//! creation order, so the node vector is already topologically sorted and
//! backward is a single reverse sweep.

use std::cell::{Cell, Ref, RefCell};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Scale(f64),
    AddScalar(f64),
    Selu,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Ln,
    Square,
    Sqrt,
    Recip,
    Abs,
}

/// Which logit transform an angular-margin head applies to the target class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarginKind {
    /// `s * cos(theta)`
    Normalized,
    /// `s * (cos(theta) - m)`
    Additive,
    /// `s * cos(theta + m)`
    Angular,
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Var, Unary),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    IndexSelect { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    ReduceMean(Var),
    ReduceMax { x: Var, argmax: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: (usize, usize) },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    AdaptiveAvgPool2d(Var),
    BatchNormTrain { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Simam { x: Var, lambda: f64, leave_one_out: bool },
    WeightedCe { logits: Var, labels: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    AngularMargin { cos: Var, labels: Vec<usize>, margins: [f64; 2], scale: f64, kind: MarginKind },
}

impl Op {
    /// Short name, used in diagnostics.
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Unary(..) => "unary",
            Op::Reshape(..) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::IndexSelect { .. } => "index_select",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ReduceMean(..) => "reduce_mean",
            Op::ReduceMax { .. } => "reduce_max",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AdaptiveAvgPool2d(..) => "adaptive_avg_pool2d",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Simam { .. } => "simam",
            Op::WeightedCe { .. } => "weighted_ce",
            Op::AngularMargin { .. } => "angular_margin",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A reverse-mode tape. One graph per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
    freed: Cell<bool>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Accumulation buffer used during the reverse sweep.
pub(crate) struct GradBuf<'a> {
    grads: Vec<Option<Tensor>>,
    nodes: &'a [Node],
}

impl<'a> GradBuf<'a> {
    pub(crate) fn nodes_ref(&self) -> &'a [Node] {
        self.nodes
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Mutable gradient storage for `v`, zero-initialised on first access.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [f64] {
        let shape = self.nodes[v.0].value.shape();
        self.grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(shape))
            .data_mut()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf node; when `requires_grad` its gradient is always populated by backward.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = requires_grad && !matches!(op, Op::Leaf);
        nodes.push(Node { value, op, requires_grad });
        Ok(Var(nodes.len() - 1))
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` gets an entry, zero when it is
    /// unreachable from `loss`. Saved activations are released afterwards and
    /// the graph cannot be differentiated again.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.freed.get() {
            return Err(Error::GraphFreed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(loss_shape));
        }
        let count = nodes.len();
        let mut buf = GradBuf { grads: (0..count).map(|_| None).collect(), nodes: &nodes };
        buf.grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));

        for id in (0..=loss.0).rev() {
            let node = &buf.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = buf.grads[id].take() else { continue };
            super::ops::backward_node(id, &gy, &mut buf)?;
        }

        let mut grads = buf.grads;
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
            } else if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite("backward"));
            }
        }
        for node in nodes.iter_mut() {
            node.op = Op::Leaf;
        }
        self.freed.set(true);
        Ok(Gradients { grads })
    }
}
