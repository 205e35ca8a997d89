//! Named parameter storage and per-step binding into a [`Graph`].

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// What a tensor is, as far as the optimizer cares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Embedding,
    Bias,
    Gain,
    Scalar,
}

impl ParamKind {
    /// Only matrices are decayed; gains, biases and scalars are exempt.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Embedding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Insertion-ordered collection of named tensors with a frozen mask.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable, kind });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.shift_remove(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.trainable = false;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.iter().filter(|(_, p)| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar entries across trainable tensors.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, p)| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}

/// A graph under construction together with lazily bound parameters.
///
/// Trainable parameters become differentiable leaves, frozen ones become
/// constants, so the backward pass never touches frozen tensors.
pub struct Session<'p> {
    pub graph: Graph,
    params: &'p ParamSet,
    bound: HashMap<String, Var>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self { graph: Graph::new(), params, bound: HashMap::new() }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Internal(format!("parameter `{name}` not found")))?;
        let v = self.graph.leaf(p.value.clone(), p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    /// Backpropagates from `root` and returns a gradient for every
    /// trainable parameter. Trainable parameters that did not take part in
    /// the computation get an all-zero gradient.
    pub fn gradients(&self, root: Var) -> Result<IndexMap<String, Tensor>> {
        let mut grads = self.graph.backward(root)?;
        let mut out = IndexMap::new();
        for (name, p) in self.params.trainable() {
            let g = self
                .bound
                .get(name)
                .and_then(|v| grads.take(*v))
                .unwrap_or_else(|| Tensor::zeros(p.value.rows(), p.value.cols()));
            out.insert(name.to_string(), g);
        }
        Ok(out)
    }
}
