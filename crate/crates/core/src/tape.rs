//! Append-only reverse-mode gradient tape.
//!
//! Every differentiable operation appends one node holding its output value,
//! the ids of its inputs and a closure computing the vector-Jacobian product.
//! Inputs always precede their consumers, so a reverse walk over the node list
//! is a valid topological order and each node is visited exactly once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees for one node.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    /// Whether input `i` participates in gradient flow.
    pub needs: &'a [bool],
}

/// Vector-Jacobian product of one node. Returns one entry per input; `None`
/// means "no contribution" and is always allowed for inputs that do not need
/// a gradient.
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    requires_grad: bool,
    leaf: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: "leaf",
            value,
            inputs: Vec::new(),
            requires_grad,
            leaf: true,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    /// Records an operation. The backward closure is dropped when no input
    /// requires a gradient.
    pub fn push_op(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            inputs: inputs.to_vec(),
            requires_grad,
            leaf: false,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_val = self.value(loss);
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        acc[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = acc[idx].take() else {
                continue;
            };
            let grad = Tensor::from_parts(node.value.shape().to_vec(), g);
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| self.value(*v)).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let contributions = backward(&BackwardArgs {
                grad: &grad,
                output: &node.value,
                inputs: &inputs,
                needs: &needs,
            });
            debug_assert_eq!(contributions.len(), node.inputs.len(), "{}", node.op);
            for ((input, contrib), need) in node.inputs.iter().zip(contributions).zip(&needs) {
                let (Some(c), true) = (contrib, *need) else {
                    continue;
                };
                debug_assert_eq!(c.shape(), self.value(*input).shape(), "{}", node.op);
                match &mut acc[input.0] {
                    Some(existing) => {
                        for (e, v) in existing.iter_mut().zip(c.data()) {
                            *e += v;
                        }
                    }
                    slot @ None => *slot = Some(c.to_vec()),
                }
            }
            // Keep the gradient of the loss node itself visible to callers.
            if idx == loss.0 {
                acc[idx] = Some(grad.to_vec());
            }
        }

        let grads = self
            .nodes
            .iter()
            .zip(acc)
            .map(|(node, g)| match g {
                Some(g) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                None if node.leaf && node.requires_grad => Some(Tensor::zeros(node.value.shape())),
                None => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`; panics when `v` was not part of gradient flow.
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v)
            .unwrap_or_else(|| panic!("no gradient recorded for node {}", v.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[3]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss(s)) if s == vec![3]
        ));
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 2]));
        let y = tape.leaf(Tensor::ones(&[3]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(y), &Tensor::zeros(&[3]));
        assert_eq!(g.wrt(x), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::ones(&[2]));
        let x = tape.leaf(Tensor::ones(&[2]));
        let s = tape.mul(c, x).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert!(!tape.requires_grad(c));
    }
}
