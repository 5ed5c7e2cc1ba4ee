//! Flat, ordered parameter storage for the denoiser.
//!
//! Every learnable tensor registers once under a hierarchical name and gets
//! a stable integer id. Optimizer state, EMA shadows, gradients, and
//! checkpoints all address tensors by the same id/order, which makes
//! iteration order — and therefore training — deterministic by construction.

use std::collections::HashMap;

use ndarray::ArrayD;

use crate::error::{CoreError, Result};
use crate::model::ops::Elem;

/// Stable handle of one registered tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor; names must be unique.
    pub fn register(&mut self, name: impl Into<String>, tensor: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name '{name}'"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Tensors in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter_mut())
    }

    /// Total number of scalar parameters.
    pub fn count_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// A deep copy with identical names/order (EMA shadow, checkpoints).
    pub fn clone_values(&self) -> Self {
        self.clone()
    }

    /// A same-shaped store filled with zeros (optimizer moments, gradients).
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites the tensor registered under `name`; shapes must match.
    pub fn set_by_name(&mut self, name: &str, tensor: ArrayD<T>) -> Result<()> {
        let id = self
            .index
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Format(format!("unknown parameter '{name}'")))?;
        if self.tensors[id].shape() != tensor.shape() {
            return Err(CoreError::Format(format!(
                "parameter '{name}' shape mismatch: {:?} vs {:?}",
                self.tensors[id].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id] = tensor;
        Ok(())
    }
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient accumulator aligned with a [`ParamStore`] by id.
#[derive(Debug, Clone)]
pub struct GradStore<T> {
    tensors: Vec<ArrayD<T>>,
}

impl<T: Elem> GradStore<T> {
    pub fn zeros_like(ps: &ParamStore<T>) -> Self {
        Self {
            tensors: ps.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.tensors[id.0]
    }

    /// Adds a contribution into the slot of `id`.
    pub fn accumulate(&mut self, id: ParamId, delta: &ArrayD<T>) {
        self.tensors[id.0].zip_mut_with(delta, |g, &d| *g = *g + d);
    }

    pub fn reset(&mut self) {
        for t in &mut self.tensors {
            t.fill(T::zero());
        }
    }

    /// Tensors in id order (aligned with the owning store).
    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<T>> {
        self.tensors.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}
