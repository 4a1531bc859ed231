use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::optimize::{EpochRecord, Phase, PhaseConfig};
use crate::autodiff::{Adam, AdamConfig, Checkpoint, ParamStore};
use crate::autoencoder::{encode_situations, fit_autoencoder, AeConfig, FrozenAutoencoder, RnnAutoencoder};
use crate::data::{balance_by_mode, load_dataset, write_atomic, Dataset, Point, SceneKind, Situation};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel, PastInput, FLOW_COMPONENT};
use crate::predictor::TrajFlow;
use crate::rng::{sha256_hex, Rng};

pub const AE_CHECKPOINT_FILE: &str = "rnn_ae.ckpt.json";
pub const FLOW_CHECKPOINT_FILE: &str = "flow.ckpt.json";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to the standard sizes at the dataset's horizon.
    #[serde(default)]
    pub ae: Option<AeConfig>,
    /// Defaults to [`FlowConfig::new`] with the past input chosen by scene kind.
    #[serde(default)]
    pub flow: Option<FlowConfig>,
    pub ae_phase: PhaseConfig,
    pub flow_phase: PhaseConfig,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Std of Gaussian noise added to standardized encodings during flow training.
    #[serde(default)]
    pub encoding_noise: f64,
    /// Epochs between intermediate checkpoints.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    25
}

impl TrainConfig {
    pub fn new(dataset: PathBuf, out_dir: PathBuf, seed: u64) -> Self {
        let phase = |epochs, patience| PhaseConfig {
            epochs,
            batch_size: 64,
            lr: 1e-3,
            lr_final: Some(1e-5),
            patience,
            min_delta_abs: 1e-6,
            min_delta_rel: 1e-4,
            clip_norm: 10.0,
        };
        Self {
            seed,
            dataset,
            out_dir,
            ae: None,
            flow: None,
            ae_phase: phase(500, 50),
            flow_phase: phase(1000, 200),
            adam: AdamConfig::default(),
            encoding_noise: 0.05,
            checkpoint_every: default_checkpoint_every(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ae_phase.validate("ae_phase")?;
        self.flow_phase.validate("flow_phase")?;
        if !(self.encoding_noise >= 0.0 && self.encoding_noise.is_finite()) {
            return Err(Error::config("encoding_noise", "must be non-negative"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if let Some(ae) = &self.ae {
            ae.validate()?;
        }
        if let Some(flow) = &self.flow {
            flow.validate()?;
        }
        Ok(())
    }

    /// Hash of the settings that determine training results (paths excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("dataset");
            o.remove("out_dir");
        }
        sha256_hex(v.to_string().as_bytes())
    }

    /// Model configurations resolved against a dataset.
    pub fn resolve_models(&self, data: &Dataset) -> Result<(AeConfig, FlowConfig)> {
        let first = data
            .situations
            .first()
            .ok_or_else(|| Error::InvalidInput("dataset has no situations".into()))?;
        let (t_past, t_pred) = (first.past.len(), first.future.len());
        if let Some(bad) = data.situations.iter().find(|s| s.past.len() != t_past || s.future.len() != t_pred) {
            return Err(Error::InvalidInput(format!(
                "situation of agent {} has a different horizon",
                bad.agent_id
            )));
        }
        let ae = self.ae.clone().unwrap_or_else(|| AeConfig::with_horizon(t_pred));
        if ae.t_pred != t_pred {
            return Err(Error::config("ae.t_pred", format!("dataset futures have {t_pred} steps")));
        }
        let past_input = match data.spec.kind {
            SceneKind::Bimodal => PastInput::Displacements,
            SceneKind::Branching => PastInput::Positions,
        };
        let flow = self
            .flow
            .clone()
            .unwrap_or_else(|| FlowConfig::new(ae.enc_size, t_past, past_input));
        if flow.t_past != t_past {
            return Err(Error::config("flow.t_past", format!("dataset pasts have {t_past} points")));
        }
        if flow.latent_dim != ae.enc_size {
            return Err(Error::config("flow.latent_dim", "must equal ae.enc_size"));
        }
        Ok((ae, flow))
    }
}

/// Negative mean log-density of raw encodings given their pasts.
pub fn nll_loss(model: &FlowModel, encodings: &Array2<f64>, pasts: &[&[Point]]) -> Result<f64> {
    if encodings.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let lp = model.log_prob_batch(encodings, pasts)?;
    let nll = -lp.iter().sum::<f64>() / lp.len() as f64;
    if !nll.is_finite() {
        return Err(Error::Numerical("non-finite NLL".into()));
    }
    Ok(nll)
}

fn nll_over(model: &FlowModel, store: &ParamStore, enc: &Array2<f64>, feats: &[&[Point]]) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..enc.nrows()).step_by(256) {
        let end = (start + 256).min(enc.nrows());
        let rows = enc.slice(ndarray::s![start..end, ..]).to_owned();
        let (g, lp) = model.log_prob_graph(store, &rows, &feats[start..end], None)?;
        total -= g.value(lp).sum();
    }
    Ok(total / enc.nrows() as f64)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub ae_checkpoint: PathBuf,
    pub flow_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub history: Vec<EpochRecord>,
    pub model: TrajFlow,
}

/// CSV with columns `phase, epoch, loss, wall_time_s`.
pub fn write_training_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in history {
        w.serialize(r).map_err(|e| Error::Numerical(format!("log row: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(format!("log: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        line: 0,
        column: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                column: 0,
                message: e.to_string(),
            })
        })
        .collect()
}

fn training_error(e: Error, last: &Path) -> Error {
    match e {
        Error::Numerical(message) | Error::InvalidParams(message) => Error::Training {
            message,
            last_checkpoint: last.exists().then(|| last.to_path_buf()),
        },
        other => other,
    }
}

/// Trains the autoencoder on mode-balanced data, freezes it, then trains the
/// flow on every situation's encoding.
///
/// With `resume`, existing checkpoints in `out_dir` are continued; a
/// completed phase is loaded instead of retrained.
pub fn train_pipeline(cfg: &TrainConfig, resume: bool) -> Result<PipelineOutput> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    let (ae_cfg, flow_cfg) = cfg.resolve_models(&data)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let ae_path = cfg.out_dir.join(AE_CHECKPOINT_FILE);
    let flow_path = cfg.out_dir.join(FLOW_CHECKPOINT_FILE);
    let log_path = cfg.out_dir.join(TRAINING_LOG_FILE);
    let config_hash = cfg.hash();

    let (ae, mut history) = ae_phase(cfg, &data.situations, ae_cfg, &ae_path, &config_hash, resume)?;
    write_training_log(&log_path, &history)?;
    let flow = flow_phase(cfg, &data.situations, flow_cfg, &ae, &flow_path, &config_hash, resume, &mut history)?;
    write_training_log(&log_path, &history)?;
    Ok(PipelineOutput {
        ae_checkpoint: ae_path,
        flow_checkpoint: flow_path,
        log_path,
        history,
        model: TrajFlow::new(ae, flow)?,
    })
}

fn ae_phase(
    cfg: &TrainConfig,
    situations: &[Situation],
    ae_cfg: AeConfig,
    path: &Path,
    config_hash: &str,
    resume: bool,
) -> Result<(FrozenAutoencoder, Vec<EpochRecord>)> {
    let (mut model, mut history, adam) = match resume.then(|| Checkpoint::load(path)) {
        Some(Ok(ck)) => {
            if ck.config_hash != config_hash {
                return Err(Error::config("resume", "AE checkpoint was written by a different config"));
            }
            let (model, meta) = RnnAutoencoder::from_checkpoint(&ck)?;
            if meta.complete {
                return Ok((model.freeze(), meta.history));
            }
            let adam = ck.restore_optimizer(model.params())?;
            (model, meta.history, adam)
        }
        Some(Err(Error::Io { .. })) | None => (RnnAutoencoder::new(ae_cfg, cfg.seed)?, Vec::new(), None),
        Some(Err(e)) => return Err(e),
    };
    let balanced = balance_by_mode(situations)?;
    let save = |m: &RnnAutoencoder, adam: &Adam, h: &[EpochRecord], complete: bool| {
        let mut ck = m.to_checkpoint(Some(adam), cfg.seed, h, complete);
        ck.config_hash = config_hash.to_string();
        ck.save(path)
    };
    let every = cfg.checkpoint_every;
    let mut last_adam = None;
    fit_autoencoder(&mut model, &balanced, &cfg.ae_phase, cfg.adam, cfg.seed, &mut history, adam, |m, adam, h| {
        last_adam = Some(adam.clone());
        if h.len() % every == 0 {
            save(m, adam, h, false)?;
        }
        Ok(())
    })
    .map_err(|e| training_error(e, path))?;
    let adam = match last_adam {
        Some(a) => a,
        None => Adam::new(cfg.adam, model.params()),
    };
    save(&model, &adam, &history, true)?;
    Ok((model.freeze(), history))
}

#[allow(clippy::too_many_arguments)]
fn flow_phase(
    cfg: &TrainConfig,
    situations: &[Situation],
    flow_cfg: FlowConfig,
    ae: &FrozenAutoencoder,
    path: &Path,
    config_hash: &str,
    resume: bool,
    history: &mut Vec<EpochRecord>,
) -> Result<FlowModel> {
    let encodings = encode_situations(ae, situations)?;
    let pasts: Vec<Vec<Point>> = situations.iter().map(|s| s.past.clone()).collect();

    let (mut model, adam) = match resume.then(|| Checkpoint::load(path)) {
        Some(Ok(ck)) => {
            if ck.config_hash != config_hash {
                return Err(Error::config("resume", "flow checkpoint was written by a different config"));
            }
            let (model, meta) = FlowModel::from_checkpoint(&ck)?;
            if meta.ae_hash != ae.hash() {
                return Err(Error::config("resume", "flow checkpoint was trained against another AE"));
            }
            history.retain(|r| r.phase != FLOW_COMPONENT);
            history.extend(meta.history.into_iter().filter(|r| r.phase == FLOW_COMPONENT));
            if meta.complete {
                return Ok(model);
            }
            let adam = ck.restore_optimizer(model.params())?;
            (model, adam)
        }
        Some(Err(Error::Io { .. })) | None => {
            let mut model = FlowModel::new(flow_cfg, cfg.seed)?;
            model.fit_normalizers(&encodings, &pasts)?;
            (model, None)
        }
        Some(Err(e)) => return Err(e),
    };

    let features: Vec<Vec<Point>> = pasts.iter().map(|p| model.past_features(p)).collect::<Result<_>>()?;
    let refs: Vec<&[Point]> = features.iter().map(Vec::as_slice).collect();
    let mut adam = adam.unwrap_or_else(|| Adam::new(AdamConfig { lr: cfg.flow_phase.lr, ..cfg.adam }, model.params()));
    let ae_rel = AE_CHECKPOINT_FILE.to_string();
    let save = |m: &FlowModel, store: &ParamStore, adam: &Adam, h: &[EpochRecord], complete: bool| {
        let meta = m.metadata(ae.hash(), Some(ae_rel.clone()), h, complete);
        let ck = Checkpoint::capture(
            FLOW_COMPONENT,
            store,
            Some(adam),
            config_hash,
            cfg.seed,
            serde_json::to_value(meta).expect("metadata serializes"),
        );
        ck.save(path)
    };

    let phase = Phase {
        name: FLOW_COMPONENT,
        cfg: &cfg.flow_phase,
        seed: cfg.seed,
        n_items: situations.len(),
    };
    let mut store = model.params().clone();
    let noise = cfg.encoding_noise;
    let every = cfg.checkpoint_every;
    let shell = model.clone();
    phase
        .run(
            &mut store,
            &mut adam,
            history,
            |s, idx, rng: &mut Rng| {
                let rows = encodings.select(ndarray::Axis(0), idx);
                let feats: Vec<&[Point]> = idx.iter().map(|&i| refs[i]).collect();
                let (mut g, lp) = shell.log_prob_graph(s, &rows, &feats, Some((noise, rng)))?;
                let m = g.mean_all(lp);
                let nll = g.scale(m, -1.0);
                Ok((g, nll))
            },
            |s| nll_over(&shell, s, &encodings, &refs),
            |s, adam, h| {
                let n = h.iter().filter(|r| r.phase == FLOW_COMPONENT).count();
                if n % every == 0 {
                    save(&shell, s, adam, h, false)?;
                }
                Ok(())
            },
        )
        .map_err(|e| training_error(e, path))?;
    *model.params_mut() = store;
    save(&model, model.params(), &adam, history, true)?;
    Ok(model)
}
