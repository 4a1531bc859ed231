use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|t| Array2::zeros(t.values.raw_dim())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients stored in `params`.
    ///
    /// If any updated value would be non-finite the step is rejected and
    /// neither parameters nor moments change.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step + 1;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);

        let mut new_m = Vec::with_capacity(self.m.len());
        let mut new_v = Vec::with_capacity(self.v.len());
        let mut new_values = Vec::with_capacity(self.m.len());
        for (i, p) in params.iter().enumerate() {
            let m = &self.m[i] * beta1 + &p.grad * (1.0 - beta1);
            let v = &self.v[i] * beta2 + p.grad.mapv(|g| g * g) * (1.0 - beta2);
            let mut values = p.values.clone();
            ndarray::Zip::from(&mut values)
                .and(&m)
                .and(&v)
                .for_each(|x, &m, &v| *x -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));
            if values.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite update for parameter {}", p.name)));
            }
            new_m.push(m);
            new_v.push(v);
            new_values.push(values);
        }
        for (p, values) in params.iter_mut().zip(new_values) {
            p.values = values;
        }
        self.m = new_m;
        self.v = new_v;
        self.step = t;
        Ok(())
    }
}
