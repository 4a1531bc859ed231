use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{sha256_hex, Rng};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named learnable matrix with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub values: Array2<f64>,
    pub grad: Array2<f64>,
}

impl ParamTensor {
    pub fn shape(&self) -> Vec<usize> {
        self.values.shape().to_vec()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, values: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            self.tensors.iter().all(|t| t.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Array2::zeros(values.raw_dim());
        self.tensors.push(ParamTensor { name, values, grad });
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        self.add(name, values)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Array2::zeros((rows, cols)))
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for t in &mut self.tensors {
                t.grad.mapv_inplace(|g| g * scale);
            }
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for t in &self.tensors {
            bytes.extend_from_slice(t.name.as_bytes());
            bytes.push(0);
            for d in t.values.shape() {
                bytes.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.values.iter() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}
