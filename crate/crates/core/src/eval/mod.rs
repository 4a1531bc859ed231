//! Metrics: KL divergence to known densities, mode likelihood error,
//! oracle error and sampling time, plus their report formats.

mod gaussian;
mod kl;
mod modes;
mod oracle;
mod report;

pub use gaussian::{log_sum_exp, GaussianMixture, ModeGaussian, COVARIANCE_RIDGE};
pub use kl::{discrete_kl, fit_mode_gaussians, kl_divergence, KlResult, Q_FLOOR};
pub use modes::{
    classify_mode, distinct_windows, mean_step_distance, mode_likelihood_error, mode_masses, ErrorStats, MleResult,
    ModeClassifier, WindowMle,
};
pub use oracle::{
    hardware_description, mean_inter_mode_endpoint_distance, oracle_error, oracle_errors, oracle_from_samples,
    sampling_time_benchmark, top_count, OracleResult, TimingResult,
};
pub use report::{
    kl_csv, mle_csv, oracle_csv, samples_from_jsonl, samples_to_jsonl, timing_csv, MetricReport, Provenance,
};
