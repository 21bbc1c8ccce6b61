//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass as a sequence of nodes in execution
//! order; every node's parents precede it, so backpropagation is a single
//! reverse sweep. Node payloads are `B×C×H×W` activations behind `Rc` so
//! backward closures can reference inputs without copying them.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{Array4, ArrayD};

use crate::error::{Error, Result};
use crate::nn::{Buffers, ParamStore, Scalar};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// What one op contributes during the backward sweep: a gradient for each
/// parent (same order as the parent list) plus any parameter gradients.
pub(crate) struct BackwardResult<S: Scalar> {
    pub parent_grads: Vec<Array4<S>>,
    pub param_grads: Vec<(String, ArrayD<S>)>,
}

pub(crate) type BackwardFn<S> =
    Box<dyn Fn(&Array4<S>, &[Rc<Array4<S>>]) -> BackwardResult<S>>;

struct Node<S: Scalar> {
    value: Rc<Array4<S>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<S>>,
}

/// One forward pass over a parameter store. In training mode the graph
/// records backward closures and queues batch-norm running-stat updates for
/// the caller to apply after the step; in evaluation mode it only computes
/// values.
pub struct Graph<'a, S: Scalar> {
    params: &'a ParamStore<S>,
    buffers: &'a Buffers<S>,
    training: bool,
    nodes: Vec<Node<S>>,
    buffer_updates: Vec<(String, ArrayD<S>)>,
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new(params: &'a ParamStore<S>, buffers: &'a Buffers<S>, training: bool) -> Self {
        Graph {
            params,
            buffers,
            training,
            nodes: Vec::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Insert an input tensor as a gradient-terminal node.
    pub fn leaf(&mut self, value: Array4<S>) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub fn value(&self, var: Var) -> &Array4<S> {
        &self.nodes[var.0].value
    }

    pub(crate) fn rc_value(&self, var: Var) -> Rc<Array4<S>> {
        Rc::clone(&self.nodes[var.0].value)
    }

    pub(crate) fn param(&self, name: &str) -> Result<Rc<ArrayD<S>>> {
        self.params.get(name)
    }

    pub(crate) fn buffer(&self, name: &str) -> Result<&ArrayD<S>> {
        self.buffers.get(name)
    }

    /// Queue a running-statistics update; the trainer applies these to the
    /// owning model once the step completes.
    pub(crate) fn queue_buffer_update(&mut self, name: impl Into<String>, value: ArrayD<S>) {
        self.buffer_updates.push((name.into(), value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(String, ArrayD<S>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn push(
        &mut self,
        value: Array4<S>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<S>>,
    ) -> Var {
        debug_assert!(parents.iter().all(|&p| p < self.nodes.len()));
        self.nodes.push(Node {
            value: Rc::new(value),
            parents,
            // Evaluation-mode graphs never run backward; drop the closures.
            backward: if self.training { backward } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `seed`, whose upstream gradient is `seed_grad`.
    /// Returns accumulated parameter gradients and per-node gradients.
    pub fn backward(&self, seed: Var, seed_grad: Array4<S>) -> Result<Gradients<S>> {
        if !self.training {
            return Err(Error::validation(
                "backward called on an evaluation-mode graph",
            ));
        }
        if seed_grad.dim() != self.nodes[seed.0].value.dim() {
            return Err(Error::validation(format!(
                "seed gradient shape {:?} does not match node shape {:?}",
                seed_grad.dim(),
                self.nodes[seed.0].value.dim()
            )));
        }
        let mut node_grads: Vec<Option<Array4<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[seed.0] = Some(seed_grad);
        let mut param_grads: BTreeMap<String, ArrayD<S>> = BTreeMap::new();

        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            // Leaves keep their gradients; interior grads are consumed here.
            let Some(grad) = node_grads[i].take() else {
                continue;
            };
            let parent_values: Vec<Rc<Array4<S>>> = node
                .parents
                .iter()
                .map(|&p| Rc::clone(&self.nodes[p].value))
                .collect();
            let result = backward(&grad, &parent_values);
            debug_assert_eq!(result.parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(result.parent_grads) {
                debug_assert_eq!(g.dim(), self.nodes[p].value.dim());
                match &mut node_grads[p] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
            for (name, g) in result.param_grads {
                match param_grads.get_mut(&name) {
                    Some(acc) => *acc += &g,
                    None => {
                        param_grads.insert(name, g);
                    }
                }
            }
        }
        Ok(Gradients {
            params: param_grads,
            node_grads,
        })
    }
}

/// Result of a backward sweep.
pub struct Gradients<S: Scalar> {
    /// Parameter-name → gradient, summed over all uses of the parameter.
    pub params: BTreeMap<String, ArrayD<S>>,
    node_grads: Vec<Option<Array4<S>>>,
}

impl<S: Scalar> Default for Gradients<S> {
    /// An empty gradient set, useful for assembling synthetic gradients.
    fn default() -> Self {
        Gradients {
            params: BTreeMap::new(),
            node_grads: Vec::new(),
        }
    }
}

impl<S: Scalar> Gradients<S> {
    /// Gradient that reached `var` (present for leaves and branch points).
    pub fn of(&self, var: Var) -> Option<&Array4<S>> {
        self.node_grads.get(var.0).and_then(Option::as_ref)
    }

    /// Global L2 norm over all parameter gradients, in f64.
    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|g| g.iter())
            .map(|&v| {
                let v = v.to_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every parameter gradient in place.
    pub fn scale(&mut self, factor: S) {
        for g in self.params.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}
