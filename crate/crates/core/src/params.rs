//! Named parameter bundles.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Ordered map from parameter name to value. Iteration order is insertion
/// order, which keeps every derived computation deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Uniform initialisation in `±1/sqrt(fan_in)`, where `fan_in` is the
    /// number of rows of the weight matrix.
    pub fn init_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let mut t = Tensor::zeros(rows, cols);
        for v in t.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
        self.insert(name, t);
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }
}
