//! Named trainable parameters and their gradient accumulators.
//!
//! Gradients live outside the parameters: a forward/backward pass over a
//! [`crate::graph::Graph`] accumulates into a [`GradBuffers`], and the caller
//! owns zeroing between optimizer steps.

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn to_f64(&self) -> ParamStore<f64> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.map_to_f64()).collect(),
        }
    }

    pub fn to_f32(&self) -> ParamStore<f32> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.map_to_f32()).collect(),
        }
    }
}

/// Per-parameter gradient accumulators, shape-matched to a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct GradBuffers<T: Scalar> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradBuffers<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        GradBuffers {
            grads: store
                .values
                .iter()
                .map(|t| Tensor::zeros(t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn scale(&mut self, c: T) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v = *v * c;
            }
        }
    }

    /// First parameter holding a non-finite gradient, if any.
    pub fn find_non_finite(&self, store: &ParamStore<T>) -> Option<String> {
        for (i, g) in self.grads.iter().enumerate() {
            if !g.all_finite() {
                return Some(store.names[i].clone());
            }
        }
        None
    }
}
