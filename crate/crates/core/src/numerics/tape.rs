//! Reverse-mode gradient tape.
//!
//! Every forward op appends a node holding its output value, the handles of its
//! inputs, and a [`Backward`] rule. [`Tape::backward`] walks the nodes in
//! reverse, accumulating gradients only along paths that reach a parameter.

use std::collections::BTreeMap;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Local derivative of one recorded op.
pub trait Backward<S: Scalar>: Send + Sync {
    /// Given the gradient w.r.t. the op output, return the gradient w.r.t.
    /// each input (in input order). Entries whose `needs` flag is false may be
    /// returned as `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        needs: &[bool],
        output: &Tensor<S>,
        grad: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>>;

    fn name(&self) -> &'static str;
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<S>>>,
    param: Option<String>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Records a constant (no gradient).
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a named learnable leaf whose gradient is returned by [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            param: Some(name.to_string()),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the result of an op. The output must be finite.
    pub fn push(
        &mut self,
        value: Tensor<S>,
        inputs: &[Var],
        rule: Box<dyn Backward<S>>,
    ) -> Result<Var> {
        value.check_finite(rule.name())?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            rule: Some(rule),
            param: None,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Back-propagates from a single-element `loss` and returns the gradient
    /// of every parameter leaf, keyed by parameter name.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor<S>>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must hold one value, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), S::one()));
        let mut out = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let Some(name) = &node.param {
                grad.check_finite(&format!("gradient of {name}"))?;
                match out.get_mut(name) {
                    None => {
                        out.insert(name.clone(), grad);
                    }
                    Some(acc) => Tensor::add_assign(acc, &grad)?,
                }
                continue;
            }
            let Some(rule) = &node.rule else { continue };
            let inputs: Vec<&Tensor<S>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].needs_grad)
                .collect();
            let input_grads = rule.backward(&inputs, &needs, &node.value, &grad)?;
            for ((var, need), g) in node.inputs.iter().zip(&needs).zip(input_grads) {
                let (true, Some(g)) = (*need, g) else { continue };
                // Large intermediates are only scanned once they reach a parameter.
                if g.len() <= 4096 {
                    g.check_finite(rule.name())?;
                }
                let input_shape = self.nodes[var.0].value.shape();
                if g.shape() != input_shape {
                    return Err(Error::Consistency(format!(
                        "{} produced gradient {:?} for input {:?}",
                        rule.name(),
                        g.shape(),
                        input_shape
                    )));
                }
                match &mut grads[var.0] {
                    slot @ None => *slot = Some(g),
                    Some(acc) => acc.add_assign(&g)?,
                }
            }
        }
        Ok(out)
    }
}
