use serde::{Deserialize, Serialize};

use crate::data::{flatten, same_past, Situation};
use crate::error::{Error, Result};
use crate::predictor::TrajFlow;
use crate::rng::Rng;

use super::gaussian::{log_sum_exp, GaussianMixture, ModeGaussian};

/// Floor applied to normalized true probabilities.
pub const Q_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlResult {
    pub kl_on_samples: f64,
    pub kl_on_training: f64,
    pub n_samples: usize,
    /// Some normalized true probability had to be clamped to `Q_FLOOR`.
    pub clamped: bool,
}

/// Fits one Gaussian per mode label over flattened absolute futures.
pub fn fit_mode_gaussians(situations: &[Situation], n_modes: usize) -> Result<Vec<ModeGaussian>> {
    let mut groups: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n_modes];
    for s in situations {
        let m = s
            .mode_label
            .ok_or_else(|| Error::InvalidInput("situation without a mode label".into()))?;
        groups
            .get_mut(m)
            .ok_or_else(|| Error::InvalidInput(format!("mode label {m} out of range")))?
            .push(s.flat_future());
    }
    groups.iter().map(|g| ModeGaussian::fit(g)).collect()
}

/// `sum P log(P / Q)` after normalizing both log-weight vectors to sum to 1.
///
/// Returns the divergence and whether any normalized Q fell below `Q_FLOOR`.
pub fn discrete_kl(log_p: &[f64], log_q: &[f64]) -> Result<(f64, bool)> {
    if log_p.len() != log_q.len() || log_p.is_empty() {
        return Err(Error::Shape(format!("{} vs {} weights", log_p.len(), log_q.len())));
    }
    let zp = log_sum_exp(log_p);
    let zq = log_sum_exp(log_q);
    if !zp.is_finite() || !zq.is_finite() {
        return Err(Error::Numerical("weights do not normalize".into()));
    }
    let mut clamped = false;
    let mut kl = 0.0;
    for (lp, lq) in log_p.iter().zip(log_q) {
        let p = (lp - zp).exp();
        if p == 0.0 {
            continue;
        }
        let mut lq = lq - zq;
        if lq < Q_FLOOR.ln() {
            lq = Q_FLOOR.ln();
            clamped = true;
        }
        kl += p * ((lp - zp) - lq);
    }
    Ok((kl, clamped))
}

fn nearest(target: &[f64], pool: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in pool.iter().enumerate() {
        let d: f64 = c.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// KL divergence between model and true densities on a shared-past scene.
///
/// `kl_on_samples` draws `n_samples` futures, matches each to its nearest
/// training future and compares the model's likelihoods of the samples with
/// the true density at the matched futures. `kl_on_training` uses the same
/// matched futures but scores them with the model directly.
pub fn kl_divergence(
    model: &TrajFlow,
    training: &[Situation],
    truth: &GaussianMixture,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<KlResult> {
    let first = training
        .first()
        .ok_or_else(|| Error::InvalidInput("empty training set".into()))?;
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be positive".into()));
    }
    let pool: Vec<&Situation> = training.iter().filter(|s| same_past(&s.past, &first.past)).collect();
    let flat: Vec<Vec<f64>> = pool.iter().map(|s| s.flat_future()).collect();

    let preds = model.predict_trajectories(&first.past, n_samples, rng)?;
    let matched: Vec<usize> = preds.iter().map(|p| nearest(&flatten(&p.points), &flat)).collect();

    let log_q: Vec<f64> = matched.iter().map(|&i| truth.log_density(&flat[i])).collect();
    let log_p_samples: Vec<f64> = preds.iter().map(|p| p.log_likelihood).collect();
    let pasts: Vec<&[_]> = matched.iter().map(|&i| pool[i].past.as_slice()).collect();
    let futures: Vec<&[_]> = matched.iter().map(|&i| pool[i].future.as_slice()).collect();
    let log_p_training = model.log_likelihood_of_futures(&pasts, &futures)?;

    let (kl_on_samples, c1) = discrete_kl(&log_p_samples, &log_q)?;
    let (kl_on_training, c2) = discrete_kl(&log_p_training, &log_q)?;
    Ok(KlResult {
        kl_on_samples,
        kl_on_training,
        n_samples,
        clamped: c1 || c2,
    })
}
