use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded op: maps the upstream gradient to
/// one gradient contribution per parent, given (grad_out, parent values, own
/// forward value).
pub(crate) type GradFn<S> = Box<dyn Fn(&[S], &[&[S]], &[S]) -> Vec<Vec<S>> + Send>;

pub(crate) struct Node<S: Scalar> {
    pub op: &'static str,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<S>>,
    pub parents: Vec<usize>,
    pub grad_fn: Option<GradFn<S>>,
    pub needs_grad: bool,
}

/// Record of one differentiable computation.
///
/// Ops are appended in execution order, so every node's parents precede it
/// and [`backward`](Tape::backward) is a single reverse sweep. A tape is
/// confined to one logical thread; independent evaluations use independent
/// tapes.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Register an input tensor. Gradients flow to it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: "leaf",
            shape: t.shape().to_vec(),
            value: t.data_arc(),
            parents: Vec::new(),
            grad_fn: None,
            needs_grad: requires_grad,
        });
        self.grads.push(None);
        Var(id)
    }

    /// Register a constant (no gradient).
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Forward value as an owned [`Tensor`] (shares the buffer).
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor::from_arc(self.nodes[v.0].shape.clone(), Arc::clone(&self.nodes[v.0].value))
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn node(&self, id: usize) -> &Node<S> {
        &self.nodes[id]
    }

    /// Append an op node. Every forward output is scanned for NaN/Inf; a
    /// non-finite value aborts the step naming the op rather than
    /// propagating silently.
    pub(crate) fn push(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        value: Vec<S>,
        parents: Vec<usize>,
        grad_fn: GradFn<S>,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{op}: shape/value mismatch");
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        self.push_unchecked(op, shape, Arc::new(value), parents, grad_fn)
    }

    /// Append a node whose value aliases an existing buffer (reshape-style
    /// ops). The buffer was already finite-checked when first produced.
    pub(crate) fn push_alias(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        value: Arc<Vec<S>>,
        parents: Vec<usize>,
        grad_fn: GradFn<S>,
    ) -> Result<Var> {
        self.push_unchecked(op, shape, value, parents, grad_fn)
    }

    fn push_unchecked(
        &mut self,
        op: &'static str,
        shape: Vec<usize>,
        value: Arc<Vec<S>>,
        parents: Vec<usize>,
        grad_fn: GradFn<S>,
    ) -> Result<Var> {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            parents,
            grad_fn: if needs_grad { Some(grad_fn) } else { None },
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(id))
    }

    /// Reverse sweep from a scalar loss. Each recorded op's VJP runs exactly
    /// once; a value consumed by several ops accumulates the sum of
    /// contributions.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if self.backward_done {
            return Err(Error::invalid(
                "backward",
                "called twice on one tape without reset_grads",
            ));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![S::ONE]);

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let node = &self.nodes[id];
            let Some(grad_fn) = node.grad_fn.as_ref() else {
                continue; // leaf
            };
            let parent_values: Vec<&[S]> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].value.as_slice())
                .collect();
            // Parents always precede their consumer, so the upstream
            // gradient at `id` is final here and parents live strictly
            // below the split.
            let (below, at) = self.grads.split_at_mut(id);
            let grad_out = at[0].as_deref().expect("checked above");
            let contributions = grad_fn(grad_out, &parent_values, &node.value);
            debug_assert_eq!(contributions.len(), node.parents.len(), "{}: vjp arity", node.op);
            for (&p, contrib) in node.parents.iter().zip(contributions) {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    contrib.len(),
                    self.nodes[p].value.len(),
                    "{}: vjp size for parent {p}",
                    node.op
                );
                match &mut below[p] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += *c;
                        }
                    }
                    None => below[p] = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a node, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor shaped like the node, zeros if none reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor<S> {
        match self.grads[v.0].as_ref() {
            Some(g) => Tensor::from_arc(self.shape(v).to_vec(), Arc::new(g.clone())),
            None => Tensor::zeros(self.shape(v)),
        }
    }

    /// Clear gradients so `backward` may run again on the same record.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }
}
