//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in execution order. [`Graph::backward`]
//! consumes the graph and replays the record once in reverse, accumulating
//! each node's adjoint into its inputs.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::OpKind;

use crate::error::{ensure, Result};
use crate::scalar::Scalar;
use crate::ssm::{ScanDims, ScanTrace};
use crate::ssm::Discretization;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) struct ScanRecord<T> {
    pub dims: ScanDims,
    pub method: Discretization,
    pub keep: Option<Vec<bool>>,
    pub exempt: Option<Vec<bool>>,
    pub trace: ScanTrace<T>,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Softplus(Var),
    Tanh(Var),
    Sigmoid(Var),
    RmsNorm { x: Var, gain: Var, rms: Vec<T> },
    Softmax { x: Var, axis: usize },
    Conv1d { x: Var, kernel: Var, dilation: usize },
    Mean { x: Var, axis: usize },
    Max { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Select { mask: Vec<bool>, on: Var, off: Var },
    Gather { x: Var, index: Vec<usize> },
    Scatter { x: Var, index: Vec<usize> },
    Reshape(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
    Scan { inputs: [Var; 5], record: Box<ScanRecord<T>> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation record plus the value of every intermediate.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`, if `var` required one.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let numel = self.nodes[loss.0].value.numel();
        ensure!(
            numel == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(upstream) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[idx] = Some(upstream);
                continue;
            }
            self.propagate(idx, &upstream, &mut adj)?;
        }
        let grads = self
            .nodes
            .into_iter()
            .zip(adj)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.needs_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("adjoint shape"))
                }
                (Op::Leaf, None) if node.needs_grad => Some(Tensor::zeros(node.value.shape().to_vec())),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Adds `grad` into the adjoint of `var` if it participates in the gradient.
    pub(crate) fn accumulate(&self, adj: &mut [Option<Vec<T>>], var: Var, grad: impl FnOnce(&mut [T])) {
        if !self.nodes[var.0].needs_grad {
            return;
        }
        let numel = self.nodes[var.0].value.numel();
        let slot = adj[var.0].get_or_insert_with(|| vec![T::zero(); numel]);
        grad(slot);
    }
}
