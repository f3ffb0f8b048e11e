//! Named parameter storage shared by the model, optimizer, and checkpoints.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::Tensor;

/// Index of a parameter inside a [`ParamStore`]. Stable for the lifetime of
/// the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors. Insertion order defines the
/// checkpoint layout, so model construction must be deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under a unique name. Names become checkpoint header
    /// tokens, so whitespace is rejected.
    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::invalid_argument(format!(
                "parameter name {name:?} must be non-empty and whitespace-free"
            )));
        }
        if self.by_name.contains_key(name) {
            return Err(Error::invalid_argument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let id = self.tensors.len();
        self.by_name.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_grad());
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Iterates parameters in insertion (checkpoint) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Per-parameter update mask used to fix sub-network weights during a
/// training phase. Frozen parameters keep their value and velocity untouched.
#[derive(Debug, Clone)]
pub struct FreezeMask {
    frozen: Vec<bool>,
}

impl FreezeMask {
    pub fn none(store: &ParamStore) -> Self {
        FreezeMask { frozen: vec![false; store.len()] }
    }

    /// Freezes every parameter whose name starts with one of the prefixes.
    pub fn by_prefix(store: &ParamStore, prefixes: &[&str]) -> Self {
        let frozen = store
            .iter()
            .map(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .collect();
        FreezeMask { frozen }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.iter().filter(|&&f| f).count()
    }
}
