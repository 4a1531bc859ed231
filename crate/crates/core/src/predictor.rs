//! A frozen autoencoder paired with a trained flow: sampling trajectories
//! and scoring futures.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Checkpoint;
use crate::autoencoder::{FrozenAutoencoder, RnnAutoencoder};
use crate::data::{from_displacements, to_displacements, DisplacementSeries, Point};
use crate::error::{Error, Result};
use crate::flow::{FlowMetadata, FlowModel};
use crate::rng::Rng;

/// One sampled future with the flow's log-density of its encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub points: Vec<Point>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajFlow {
    pub ae: FrozenAutoencoder,
    pub flow: FlowModel,
}

impl TrajFlow {
    pub fn new(ae: FrozenAutoencoder, flow: FlowModel) -> Result<Self> {
        if ae.config().enc_size != flow.config().latent_dim {
            return Err(Error::Shape(format!(
                "encoding size {} does not match flow dimension {}",
                ae.config().enc_size,
                flow.config().latent_dim
            )));
        }
        Ok(Self { ae, flow })
    }

    pub fn t_past(&self) -> usize {
        self.flow.config().t_past
    }

    pub fn t_pred(&self) -> usize {
        self.ae.config().t_pred
    }

    /// Loads a flow checkpoint and the autoencoder checkpoint it references.
    ///
    /// A relative AE path is resolved against the flow checkpoint's directory.
    pub fn load(flow_path: &Path) -> Result<(Self, FlowMetadata)> {
        let ck = Checkpoint::load(flow_path)?;
        let (flow, meta) = FlowModel::from_checkpoint(&ck)?;
        let ae_rel = meta
            .ae_checkpoint
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("flow checkpoint does not reference an AE checkpoint".into()))?;
        let ae_path = resolve(flow_path, ae_rel);
        let (ae, _) = RnnAutoencoder::from_checkpoint(&Checkpoint::load(&ae_path)?)?;
        let ae = ae.freeze();
        if ae.hash() != meta.ae_hash {
            return Err(Error::InvalidInput(format!(
                "AE checkpoint {} does not match the one the flow was trained against",
                ae_path.display()
            )));
        }
        Ok((Self::new(ae, flow)?, meta))
    }

    /// Samples `n` futures for `past`, integrating decoded displacements from
    /// the last observed position.
    pub fn predict_trajectories(&self, past: &[Point], n: usize, rng: &mut Rng) -> Result<Vec<Prediction>> {
        let (enc, log_p) = self.flow.sample(n, past, rng)?;
        let origin = *past.last().ok_or_else(|| Error::InvalidInput("empty past".into()))?;
        let decoded = self.ae.decode_batch(&enc)?;
        decoded
            .into_iter()
            .zip(log_p)
            .map(|(deltas, log_likelihood)| {
                Ok(Prediction {
                    points: from_displacements(&DisplacementSeries { origin, deltas })?,
                    log_likelihood,
                })
            })
            .collect()
    }

    /// Encoding-space log-densities of given futures, each with its past.
    pub fn log_likelihood_of_futures(&self, pasts: &[&[Point]], futures: &[&[Point]]) -> Result<Vec<f64>> {
        if pasts.len() != futures.len() {
            return Err(Error::Shape(format!("{} pasts for {} futures", pasts.len(), futures.len())));
        }
        let mut out = Vec::with_capacity(futures.len());
        for (p_chunk, f_chunk) in pasts.chunks(256).zip(futures.chunks(256)) {
            let deltas: Vec<Vec<Point>> = p_chunk
                .iter()
                .zip(f_chunk)
                .map(|(p, f)| {
                    let origin = *p.last().ok_or_else(|| Error::InvalidInput("empty past".into()))?;
                    Ok(to_displacements(f, origin)?.deltas)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&[Point]> = deltas.iter().map(Vec::as_slice).collect();
            let enc: Array2<f64> = self.ae.encode_batch(&refs)?;
            out.extend(self.flow.log_prob_batch(&enc, p_chunk)?);
        }
        Ok(out)
    }
}

pub(crate) fn resolve(base_file: &Path, target: &str) -> PathBuf {
    let t = Path::new(target);
    if t.is_absolute() {
        t.to_path_buf()
    } else {
        base_file.parent().unwrap_or(Path::new(".")).join(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AeConfig;
    use crate::flow::{FlowConfig, PastInput};
    use crate::rng::substream;

    #[test]
    fn prediction_shapes() {
        let ae = RnnAutoencoder::new(AeConfig::with_horizon(7), 1).unwrap().freeze();
        let flow = FlowModel::new(FlowConfig::new(4, 5, PastInput::Displacements), 2).unwrap();
        let model = TrajFlow::new(ae, flow).unwrap();
        let past: Vec<Point> = (0..5).map(|i| [i as f64, 1.0]).collect();
        let preds = model.predict_trajectories(&past, 9, &mut substream(3, "p")).unwrap();
        assert_eq!(preds.len(), 9);
        assert!(preds.iter().all(|p| p.points.len() == 7 && p.log_likelihood.is_finite()));
        assert_eq!(model.predict_trajectories(&past, 1, &mut substream(3, "p")).unwrap().len(), 1);
    }

    #[test]
    fn sample_likelihood_matches_rescoring_in_encoding_space() {
        let ae = RnnAutoencoder::new(AeConfig::with_horizon(6), 4).unwrap().freeze();
        let flow = FlowModel::new(FlowConfig::new(4, 4, PastInput::Positions), 5).unwrap();
        let model = TrajFlow::new(ae, flow).unwrap();
        let past: Vec<Point> = (0..4).map(|i| [i as f64 * 0.5, 0.0]).collect();
        let mut rng = substream(6, "s");
        let (enc, lp) = model.flow.sample(5, &past, &mut rng).unwrap();
        let again = model.flow.log_prob_batch(&enc, &vec![past.as_slice(); 5]).unwrap();
        for (a, b) in lp.iter().zip(again) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
