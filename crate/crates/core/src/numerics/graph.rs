use super::ops;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    Gelu { x: Var },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    WindowPool { x: Var, windows: ops::pool::Windows },
    MaxPool { x: Var, argmax: Vec<usize> },
    Conv2d { x: Var, k: Var, geom: ops::conv::ConvGeom, cols: Vec<f64> },
    DepthwiseConv2d { x: Var, k: Var, pad: usize },
    Upsample { x: Var, rows: Vec<ops::resample::Tap>, cols: Vec<ops::resample::Tap> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Records a forward computation for a single reverse pass.
///
/// Nodes are appended in creation order, which is already a topological
/// order, so the reverse pass walks the node list backwards once.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a leaf whose gradient is populated by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last backward pass for a leaf; `None` when the leaf
    /// was not reached or does not track gradients.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v), g.clone()).ok()
    }

    pub(crate) fn push(&mut self, name: &str, value: Tensor, op: Op) -> Result<Var> {
        if self.backward_done {
            return Err(Error::Usage(format!("cannot record `{name}` after backward; start a new graph")));
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by `{name}`")));
        }
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar loss. Populates gradients of every leaf
    /// created with [`Graph::leaf`] that the loss depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;
        let mut grads = Grads { nodes: &self.nodes, slots: (0..self.nodes.len()).map(|_| None).collect() };
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads.slots;
            return Ok(());
        }
        grads.slots[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads.slots[i].take() else { continue };
            ops::backward(&node.op, &node.value, &g, &mut grads);
        }
        let mut slots = grads.slots;
        for (slot, node) in slots.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) {
                *slot = None;
            }
        }
        self.grads = slots;
        Ok(())
    }
}

/// Gradient accumulator handed to per-op backward rules.
pub(crate) struct Grads<'a> {
    nodes: &'a [Node],
    slots: Vec<Option<Vec<f64>>>,
}

impl<'a> Grads<'a> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first use.
    pub(crate) fn slot(&mut self, v: Var) -> &mut [f64] {
        let n = self.nodes[v.0].value.numel();
        self.slots[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.slots[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        Op::Scale { x, .. }
        | Op::Gelu { x }
        | Op::Softmax { x }
        | Op::WindowPool { x, .. }
        | Op::MaxPool { x, .. }
        | Op::Upsample { x, .. }
        | Op::Reshape { x }
        | Op::Permute { x, .. }
        | Op::Sum { x }
        | Op::Mean { x } => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Conv2d { x, k, .. } | Op::DepthwiseConv2d { x, k, .. } => vec![*x, *k],
        Op::Concat { parts } => parts.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}
