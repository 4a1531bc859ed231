//! Conditional normalizing flows over RNN-autoencoded future trajectories,
//! with synthetic multi-modal benchmarks and likelihood-aware metrics.

pub mod autodiff;
pub mod autoencoder;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod nn;
pub mod predictor;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
