//! Binds model parameters into a [`Graph`] for one forward pass.
//!
//! Each trainable tensor becomes a single named leaf per graph, so gradients
//! from every use site (all samples of a batch) accumulate on one node.
//! Frozen tensors enter as anonymous constants and never receive gradients.

use std::collections::HashMap;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct Binding<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    vars: HashMap<String, Var>,
    grad_enabled: bool,
}

impl<'g, T: Scalar> Binding<'g, T> {
    /// Binding for a training pass: trainable leaves collect gradients.
    pub fn training(graph: &'g Graph<T>) -> Self {
        Binding {
            graph,
            vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Binding for inference: nothing collects gradients, the backward
    /// sweep is a no-op.
    pub fn inference(graph: &'g Graph<T>) -> Self {
        Binding {
            graph,
            vars: HashMap::new(),
            grad_enabled: false,
        }
    }

    /// Bind a trainable tensor (idempotent per name).
    pub fn trainable(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let v = self.graph.leaf(value.clone(), self.grad_enabled);
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn frozen(&self, value: &Tensor<T>) -> Var {
        self.graph.constant(value.clone())
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// All trainable leaves bound so far.
    pub fn bound(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }
}
