//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass: each op appends a node
//! holding its output value, so node order is a topological order and the
//! graph is acyclic by construction. [`Graph::backward`] walks the tape once
//! in reverse and is the end of the graph's useful life.

mod gradcheck;
mod ops;

use std::collections::HashMap;

pub use gradcheck::{grad_check, grad_check_module, GradCheckReport, REL_ERROR_FLOOR};
pub(crate) use ops::Op;

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<String>,
}

pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false, None)
    }

    /// Input whose gradient is wanted (e.g. the image under attack).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true, None)
    }

    /// Parameter leaf; tracks gradients only if the parameter is trainable.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.leaf(p.tensor.clone(), p.trainable, Some(p.name.clone()))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Gradients of every use of a node are
    /// summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            node.op.backward(self, &node.value, &g, &mut grads);
        }

        let mut by_param: HashMap<String, Tensor<T>> = HashMap::new();
        let mut by_var = Vec::with_capacity(grads.len());
        for (id, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[id];
            let t = g.map(|d| Tensor::new(node.value.shape().to_vec(), d).expect("grad shape"));
            if let (Some(name), Some(t)) = (&node.param, &t) {
                match by_param.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        by_param.insert(name.clone(), t.clone());
                    }
                }
            }
            by_var.push(t);
        }
        Ok(Gradients { by_var, by_param })
    }

    /// Adds `g` into the gradient slot of `v` when `v` tracks gradients.
    pub(crate) fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Like [`accumulate`](Self::accumulate) but lets the caller add in place,
    /// avoiding a temporary.
    pub(crate) fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<T>>],
        v: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]);
        f(slot);
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    by_var: Vec<Option<Tensor<T>>>,
    by_param: HashMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a graph node, if it tracked one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_var.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter by name, if the parameter was on the path.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_param.get(name)
    }

    /// Gradient of a parameter, zeros when it never entered the graph.
    pub fn param_or_zeros(&self, p: &Parameter<T>) -> Tensor<T> {
        self.by_param
            .get(&p.name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
    }

    pub fn params(&self) -> &HashMap<String, Tensor<T>> {
        &self.by_param
    }

    pub fn into_params(self) -> HashMap<String, Tensor<T>> {
        self.by_param
    }
}
