//! Shared mini-batch loop with plateau early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, Rng};

/// Schedule of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// If set, the rate follows a cosine from `lr` down to this value over `epochs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_final: Option<f64>,
    /// Stop after this many epochs without improvement.
    pub patience: usize,
    pub min_delta_abs: f64,
    pub min_delta_rel: f64,
    pub clip_norm: f64,
}

impl PhaseConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |f: &str| format!("{prefix}.{f}");
        if self.batch_size == 0 {
            return Err(Error::config(field("batch_size"), "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(field("lr"), "must be positive"));
        }
        if let Some(f) = self.lr_final {
            if !(f > 0.0 && f <= self.lr) {
                return Err(Error::config(field("lr_final"), "must be positive and at most lr"));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config(field("clip_norm"), "must be positive"));
        }
        if self.min_delta_abs < 0.0 || self.min_delta_rel < 0.0 {
            return Err(Error::config(field("min_delta_abs"), "plateau thresholds must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_final {
            None => self.lr,
            Some(f) => {
                let progress = (epoch.saturating_sub(1) as f64 / self.epochs.max(1) as f64).min(1.0);
                f + 0.5 * (self.lr - f) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub wall_time_s: f64,
}

/// True once `patience` epochs have passed without a sufficient improvement
/// over the best loss seen before them.
pub fn plateau_reached(losses: &[f64], cfg: &PhaseConfig) -> bool {
    if cfg.patience == 0 || losses.is_empty() {
        return false;
    }
    let mut best = f64::INFINITY;
    let mut since = 0;
    for &l in losses {
        let margin = cfg.min_delta_abs.max(cfg.min_delta_rel * best.abs());
        if best.is_infinite() || l < best - margin {
            best = l;
            since = 0;
        } else {
            since += 1;
        }
    }
    since >= cfg.patience
}

pub(crate) struct Phase<'a> {
    pub name: &'a str,
    pub cfg: &'a PhaseConfig,
    pub seed: u64,
    pub n_items: usize,
}

impl Phase<'_> {
    pub fn finished(&self, history: &[EpochRecord]) -> bool {
        let losses: Vec<f64> = history.iter().filter(|r| r.phase == self.name).map(|r| r.loss).collect();
        losses.len() >= self.cfg.epochs || plateau_reached(&losses, self.cfg)
    }

    /// Runs epochs until the budget or a plateau is reached.
    ///
    /// `batch` builds the loss graph for a set of item indices, `full` gives
    /// the clean loss over every item (logged), and `after_epoch` sees the
    /// state after each logged epoch (used for checkpoints).
    pub fn run<B, F, A>(
        &self,
        store: &mut ParamStore,
        adam: &mut Adam,
        history: &mut Vec<EpochRecord>,
        mut batch: B,
        mut full: F,
        mut after_epoch: A,
    ) -> Result<()>
    where
        B: FnMut(&ParamStore, &[usize], &mut Rng) -> Result<(Graph, Var)>,
        F: FnMut(&ParamStore) -> Result<f64>,
        A: FnMut(&ParamStore, &Adam, &[EpochRecord]) -> Result<()>,
    {
        if self.n_items == 0 {
            return Err(Error::InvalidInput(format!("phase {} has no training items", self.name)));
        }
        let start = Instant::now();
        let time_offset = history
            .iter()
            .rev()
            .find(|r| r.phase == self.name)
            .map_or(0.0, |r| r.wall_time_s);
        while !self.finished(history) {
            let epoch = history.iter().filter(|r| r.phase == self.name).count() + 1;
            let mut rng = indexed_substream(self.seed, self.name, epoch as u64);
            let mut order: Vec<usize> = (0..self.n_items).collect();
            order.shuffle(&mut rng);
            adam.config.lr = self.cfg.lr_at(epoch);
            for chunk in order.chunks(self.cfg.batch_size) {
                store.zero_grad();
                let (g, loss) = batch(store, chunk, &mut rng)?;
                g.backward(loss, store)
                    .map_err(|e| Error::Numerical(format!("{} epoch {epoch}: {e}", self.name)))?;
                store.clip_grad_norm(self.cfg.clip_norm);
                adam.step(store)?;
            }
            let loss = full(store)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("{} epoch {epoch}: loss is {loss}", self.name)));
            }
            history.push(EpochRecord {
                phase: self.name.to_string(),
                epoch,
                loss,
                wall_time_s: time_offset + start.elapsed().as_secs_f64(),
            });
            after_epoch(store, adam, history)?;
        }
        Ok(())
    }
}
