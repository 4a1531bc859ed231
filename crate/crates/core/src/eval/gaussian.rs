use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Diagonal ridge added to every fitted covariance.
pub const COVARIANCE_RIDGE: f64 = 1e-9;

/// Full-covariance Gaussian over flattened futures.
#[derive(Debug, Clone)]
pub struct ModeGaussian {
    pub mean: DVector<f64>,
    /// Sample covariance plus the ridge.
    pub covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl ModeGaussian {
    /// Sample mean and (n - 1)-normalized covariance of `samples`.
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 samples, got {}", samples.len())));
        }
        let d = samples[0].len();
        if d == 0 || samples.iter().any(|s| s.len() != d) {
            return Err(Error::Shape("samples must share a non-zero length".into()));
        }
        let n = samples.len() as f64;
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += DVector::from_column_slice(s);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for s in samples {
            let c = DVector::from_column_slice(s) - &mean;
            cov.syger(1.0, &c, &c, 1.0);
        }
        cov /= n - 1.0;
        cov.fill_upper_triangle_with_lower_triangle();
        Self::new(mean, cov)
    }

    /// Gaussian with the given mean and covariance (the ridge is added here).
    pub fn new(mean: DVector<f64>, mut covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::Shape("covariance must be D x D".into()));
        }
        for i in 0..d {
            covariance[(i, i)] += COVARIANCE_RIDGE;
        }
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        Ok(Self {
            mean,
            covariance,
            chol,
            log_norm: -0.5 * (d as f64 * (2.0 * PI).ln() + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let y = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        self.log_norm - 0.5 * y.norm_squared()
    }
}

/// Weighted mixture of mode Gaussians.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub components: Vec<ModeGaussian>,
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn equal(components: Vec<ModeGaussian>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidInput("mixture needs a component".into()));
        }
        let w = 1.0 / components.len() as f64;
        Ok(Self {
            weights: vec![w; components.len()],
            components,
        })
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w.ln() + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
