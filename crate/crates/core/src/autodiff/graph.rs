//! Define-by-run tape. Every forward op appends one node; `backward` walks
//! the nodes once, last to first.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees when it runs.
pub struct BackwardCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// `needs[i]` is false when input `i` does not lead to any tracked leaf;
    /// rules may skip computing that gradient.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation.
pub trait BackwardOp<T: Real>: Send {
    fn name(&self) -> &'static str;

    /// Returns one entry per input, `None` where `needs` is false.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>;
}

struct Recorded<T> {
    op: Box<dyn BackwardOp<T>>,
    inputs: Vec<Var>,
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Tensor<T>>,
    recorded: Option<Recorded<T>>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, true, None)
    }

    /// A leaf treated as a constant.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, true, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, populated by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// A constant copy of `v`'s value; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    /// Appends the result of an operation. The backward rule is stored only
    /// when at least one input is tracked.
    pub fn record(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: impl BackwardOp<T> + 'static,
    ) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let recorded = requires_grad.then(|| Recorded {
            op: Box::new(op),
            inputs: inputs.to_vec(),
        });
        self.push(output, requires_grad, false, recorded)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        is_leaf: bool,
        recorded: Option<Recorded<T>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf,
            grad: None,
            recorded,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar loss. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be 1×1×1×1, got {shape}"),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract(
                "backward",
                "loss does not depend on any tracked parameter",
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.is_leaf {
                if node.requires_grad {
                    let slot = &mut self.nodes[idx].grad;
                    match slot {
                        Some(g) => g.accumulate(&grad),
                        None => *slot = Some(grad),
                    }
                }
                continue;
            }
            let Some(rec) = node.recorded.as_ref() else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: rec.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: rec
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let input_grads = rec.op.backward(&ctx);
            debug_assert_eq!(input_grads.len(), rec.inputs.len(), "{}", rec.op.name());
            for (v, g) in rec.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "{}", rec.op.name());
                match &mut grads[v.0] {
                    Some(acc) => acc.accumulate(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Name of the op that produced `v`, if recorded.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].recorded.as_ref().map(|r| r.op.name())
    }
}
