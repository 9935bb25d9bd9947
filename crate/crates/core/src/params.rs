//! Named parameter tensors and their graph leaves.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{Bindings, Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.index_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
    }

    /// Registers a `fan_in x fan_out` weight and `1 x fan_out` bias,
    /// both uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_linear<R: Rng + ?Sized>(
        &mut self,
        weight: &str,
        bias: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert(weight, Tensor::uniform(fan_in, fan_out, bound, rng));
        self.insert(bias, Tensor::uniform(1, fan_out, bound, rng));
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn set_zero(&mut self) {
        for (_, t) in &mut self.entries {
            t.data_mut().fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Declares one graph input per parameter.
    pub fn declare(&self, graph: &mut Graph) -> Leaves {
        let ids = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), graph.input(n.clone(), t.rows(), t.cols())))
            .collect();
        Leaves { ids }
    }

    pub fn bind(&self, leaves: &Leaves, bindings: &mut Bindings) -> Result<()> {
        for (name, value) in &self.entries {
            let id = leaves.get(name)?;
            bindings.bind(id, value.clone());
        }
        Ok(())
    }

    /// Collects the gradient of each parameter from a backward pass, in parameter order.
    pub fn gradients_from(&self, leaves: &Leaves, grads: &Gradients) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|(name, t)| {
                let id = leaves.get(name)?;
                Ok(grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            })
            .collect()
    }
}

/// Graph leaves for a parameter set, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Leaves {
    ids: HashMap<String, NodeId>,
}

impl Leaves {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no graph leaf for parameter {name}")))
    }

    pub fn ids(&self) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.ids.values().copied().collect();
        v.sort();
        v
    }

    pub fn merge(mut self, other: Leaves) -> Leaves {
        self.ids.extend(other.ids);
        self
    }
}
