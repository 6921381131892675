//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted graph node. Nodes only keep their parents
//! (and a backward closure) when at least one input requires a gradient, so a
//! forward pass over constants retains no graph and intermediates are freed as
//! soon as they go out of scope.

mod conv;
mod ops;
mod spectral;

pub use conv::{avg_pool1d, conv1d, conv2d, conv_transpose1d, Conv1dSpec, Conv2dSpec};
pub use ops::{concat_channels, sigmoid};
pub use spectral::{stft_magnitude, MagnitudeMode};

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::Tensor;

/// Computes parent gradients from the output gradient and output value.
/// `needs[i]` tells whether parent `i` requires a gradient; entries for parents
/// that do not may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct GradFn {
    parents: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl core::fmt::Debug for Var {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Var {
    /// Leaf that accumulates a gradient.
    pub fn param(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: true,
            grad_fn: None,
        }))
    }

    /// Leaf without gradient.
    pub fn constant(value: Tensor) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            grad_fn: None,
        }))
    }

    pub(crate) fn from_op(value: Tensor, parents: Vec<Var>, backward: BackwardFn) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Var(Rc::new(Node {
                value,
                requires_grad: true,
                grad_fn: Some(GradFn { parents, backward }),
            }))
        } else {
            Var::constant(value)
        }
    }

    #[inline]
    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    #[inline]
    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.value().clone())
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Back-propagates from this node, seeding its gradient with ones.
    pub fn backward(&self) -> Gradients {
        let mut grads = BTreeMap::new();
        if !self.requires_grad() {
            return Gradients { grads };
        }
        let order = self.topological_order();
        grads.insert(self.key(), Tensor::full(self.shape(), 1.0));
        for node in order.iter().rev() {
            let Some(grad_fn) = &node.0.grad_fn else {
                continue;
            };
            let Some(g) = grads.remove(&node.key()) else {
                continue;
            };
            let needs: Vec<bool> = grad_fn.parents.iter().map(Var::requires_grad).collect();
            let parent_grads = (grad_fn.backward)(&g, node.value(), &needs);
            debug_assert_eq!(parent_grads.len(), grad_fn.parents.len());
            for ((parent, pg), need) in grad_fn.parents.iter().zip(parent_grads).zip(needs) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), parent.shape());
                match grads.get_mut(&parent.key()) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(parent.key(), pg);
                    }
                }
            }
        }
        Gradients { grads }
    }

    /// Nodes requiring gradients, parents before children.
    fn topological_order(&self) -> Vec<Var> {
        let mut order = Vec::new();
        let mut visited = BTreeSet::new();
        let mut stack: Vec<(Var, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((node, idx)) = stack.pop() {
            let parents = node.0.grad_fn.as_ref().map(|g| g.parents.as_slice()).unwrap_or(&[]);
            if idx < parents.len() {
                let parent = parents[idx].clone();
                stack.push((node, idx + 1));
                if parent.requires_grad() && visited.insert(parent.key()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

/// Gradients of leaf parameters after a backward pass.
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        self.grads.get(&var.key())
    }

    /// Gradient for `var`, or zeros when it did not influence the output.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Largest relative error between the analytic gradient and central
    /// differences over `probes` coordinates of every input.
    pub fn max_rel_error(inputs: &[Tensor], f: impl Fn(&[Var]) -> Var, eps: f64, probes: usize) -> f64 {
        let vars: Vec<Var> = inputs.iter().cloned().map(Var::param).collect();
        let out = f(&vars);
        let grads = out.backward();
        let mut worst: f64 = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(&vars[i]);
            // Components far below the gradient's scale are dominated by
            // finite-difference noise, so they are judged against that scale.
            let floor = (1e-3 * analytic.max_abs()).max(1e-6);
            let n = input.numel();
            let step = (n / probes.max(1)).max(1);
            for j in (0..n).step_by(step).take(probes) {
                let eval = |delta: f64| {
                    let perturbed: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, t)| {
                            let mut t = t.clone();
                            if k == i {
                                t.data_mut()[j] += delta;
                            }
                            Var::constant(t)
                        })
                        .collect();
                    f(&perturbed).value().item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data()[j];
                let denom = a.abs().max(numeric.abs()).max(floor);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}
