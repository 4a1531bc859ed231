//! GRU autoencoder compressing future displacement sequences into a short
//! encoding, with an autoregressive decoder.

use std::ops::Deref;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Checkpoint, Graph, ParamStore, Var};
use crate::data::{from_displacements, to_displacements, DisplacementSeries, Point, Situation};
use crate::error::{Error, Result};
use crate::nn::{BoundGru, BoundLinear, Gru, Linear};
use crate::rng::{sha256_hex, substream};
use crate::training::{EpochRecord, Phase, PhaseConfig};

pub const AE_COMPONENT: &str = "rnn_ae";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub em_size: usize,
    pub enc_size: usize,
    pub gru_num_layers: usize,
    pub gru_hidden_size: usize,
    pub t_pred: usize,
}

impl AeConfig {
    /// Default sizes: embedding 4, encoding 4, three GRU layers of width 4.
    pub fn with_horizon(t_pred: usize) -> Self {
        Self {
            em_size: 4,
            enc_size: 4,
            gru_num_layers: 3,
            gru_hidden_size: 4,
            t_pred,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("em_size", self.em_size),
            ("enc_size", self.enc_size),
            ("gru_num_layers", self.gru_num_layers),
            ("gru_hidden_size", self.gru_hidden_size),
            ("t_pred", self.t_pred),
        ] {
            if v == 0 {
                return Err(Error::config(format!("ae.{name}"), "must be a positive integer"));
            }
        }
        // The decoder feeds its last hidden state back through the input layer.
        if self.gru_hidden_size != self.enc_size {
            return Err(Error::config("ae.gru_hidden_size", "must equal enc_size"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    embed: Linear,
    enc_gru: Gru,
    enc_out: Linear,
    dec_in: Linear,
    dec_gru: Gru,
    dec_out: Linear,
}

struct Bound {
    embed: BoundLinear,
    enc_gru: BoundGru,
    enc_out: BoundLinear,
    dec_in: BoundLinear,
    dec_gru: BoundGru,
    dec_out: BoundLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnAutoencoder {
    config: AeConfig,
    params: ParamStore,
    layers: Layers,
    /// Displacements are divided by this before encoding and decoder outputs
    /// multiplied by it.
    input_scale: f64,
}

/// Metadata stored alongside AE checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeMetadata {
    pub config: AeConfig,
    pub input_scale: f64,
    pub history: Vec<EpochRecord>,
    pub complete: bool,
}

impl RnnAutoencoder {
    pub fn new(config: AeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "rnn_ae.init");
        let mut p = ParamStore::new();
        let c = &config;
        let layers = Layers {
            embed: Linear::new(&mut p, "enc.embed", 2, c.em_size, &mut rng),
            enc_gru: Gru::new(&mut p, "enc.gru", c.em_size, c.gru_hidden_size, c.gru_num_layers, &mut rng),
            enc_out: Linear::new(&mut p, "enc.out", c.gru_hidden_size, c.enc_size, &mut rng),
            dec_in: Linear::new(&mut p, "dec.in", c.enc_size, c.em_size, &mut rng),
            dec_gru: Gru::new(&mut p, "dec.gru", c.em_size, c.gru_hidden_size, c.gru_num_layers, &mut rng),
            dec_out: Linear::new(&mut p, "dec.out", c.gru_hidden_size, 2, &mut rng),
        };
        Ok(Self {
            config,
            params: p,
            layers,
            input_scale: 1.0,
        })
    }

    pub fn config(&self) -> &AeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    pub fn set_input_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("input scale must be positive, got {scale}")));
        }
        self.input_scale = scale;
        Ok(())
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore) -> Bound {
        let l = &self.layers;
        Bound {
            embed: l.embed.bind(g, store),
            enc_gru: l.enc_gru.bind(g, store),
            enc_out: l.enc_out.bind(g, store),
            dec_in: l.dec_in.bind(g, store),
            dec_gru: l.dec_gru.bind(g, store),
            dec_out: l.dec_out.bind(g, store),
        }
    }

    /// Per-timestep `batch × 2` arrays of scaled displacements.
    fn step_inputs(&self, futures: &[&[Point]]) -> Result<Vec<Array2<f64>>> {
        let t_pred = self.config.t_pred;
        if let Some(bad) = futures.iter().find(|f| f.len() != t_pred) {
            return Err(Error::Shape(format!("future has {} steps, expected {t_pred}", bad.len())));
        }
        Ok((0..t_pred)
            .map(|t| Array2::from_shape_fn((futures.len(), 2), |(b, j)| futures[b][t][j] / self.input_scale))
            .collect())
    }

    fn encode_on(&self, g: &mut Graph, b: &Bound, steps: &[Array2<f64>]) -> Var {
        let batch = steps[0].nrows();
        let mut state = b.enc_gru.zero_state(g, batch);
        let mut top = state[state.len() - 1];
        for x in steps {
            let xin = g.input(x.clone());
            let e = b.embed.forward(g, xin);
            top = b.enc_gru.step(g, e, &mut state);
        }
        b.enc_out.forward(g, top)
    }

    /// Decoded scaled displacements, one `batch × 2` node per step.
    fn decode_on(&self, g: &mut Graph, b: &Bound, enc: Var, batch: usize) -> Vec<Var> {
        let mut state = b.dec_gru.zero_state(g, batch);
        let mut feed = enc;
        (0..self.config.t_pred)
            .map(|_| {
                let x = b.dec_in.forward(g, feed);
                feed = b.dec_gru.step(g, x, &mut state);
                b.dec_out.forward(g, feed)
            })
            .collect()
    }

    /// Mean squared reconstruction error over displacement components.
    pub fn loss_graph(&self, store: &ParamStore, futures: &[&[Point]]) -> Result<(Graph, Var)> {
        let steps = self.step_inputs(futures)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, store);
        let enc = self.encode_on(&mut g, &b, &steps);
        let outs = self.decode_on(&mut g, &b, enc, futures.len());
        let recon = g.concat_cols(&outs);
        let recon = g.scale(recon, self.input_scale);
        let target = Array2::from_shape_fn((futures.len(), 2 * self.config.t_pred), |(r, c)| futures[r][c / 2][c % 2]);
        let target = g.input(target);
        let diff = g.sub(recon, target);
        let sq = g.square(diff);
        let loss = g.mean_all(sq);
        Ok((g, loss))
    }

    /// Encodes displacement sequences, one row per input.
    pub fn encode_batch(&self, futures: &[&[Point]]) -> Result<Array2<f64>> {
        if futures.is_empty() {
            return Ok(Array2::zeros((0, self.config.enc_size)));
        }
        let steps = self.step_inputs(futures)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.params);
        let enc = self.encode_on(&mut g, &b, &steps);
        Ok(g.value(enc).clone())
    }

    pub fn encode(&self, future: &DisplacementSeries) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[&future.deltas])?.row(0).to_vec())
    }

    /// Decodes each row of `enc` into `t_pred` displacements.
    pub fn decode_batch(&self, enc: &Array2<f64>) -> Result<Vec<Vec<Point>>> {
        if enc.ncols() != self.config.enc_size {
            return Err(Error::Shape(format!(
                "encoding has {} entries, expected {}",
                enc.ncols(),
                self.config.enc_size
            )));
        }
        if enc.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite encoding".into()));
        }
        let n = enc.nrows();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.params);
        let e = g.input(enc.clone());
        let outs = self.decode_on(&mut g, &b, e, n);
        Ok((0..n)
            .map(|r| {
                outs.iter()
                    .map(|&o| {
                        let v = g.value(o);
                        [v[[r, 0]] * self.input_scale, v[[r, 1]] * self.input_scale]
                    })
                    .collect()
            })
            .collect())
    }

    pub fn decode(&self, enc: &[f64]) -> Result<Vec<Point>> {
        let row = Array2::from_shape_vec((1, enc.len()), enc.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.decode_batch(&row)?.remove(0))
    }

    pub fn to_checkpoint(&self, adam: Option<&Adam>, seed: u64, history: &[EpochRecord], complete: bool) -> Checkpoint {
        let meta = AeMetadata {
            config: self.config.clone(),
            input_scale: self.input_scale,
            history: history.to_vec(),
            complete,
        };
        Checkpoint::capture(
            AE_COMPONENT,
            &self.params,
            adam,
            &self.config.hash(),
            seed,
            serde_json::to_value(meta).expect("metadata serializes"),
        )
    }

    /// Rebuilds a model from a checkpoint, returning it with its metadata.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, AeMetadata)> {
        if ck.component != AE_COMPONENT {
            return Err(Error::InvalidInput(format!("checkpoint component is {}, expected {AE_COMPONENT}", ck.component)));
        }
        let meta: AeMetadata = serde_json::from_value(ck.metadata.clone()).map_err(|e| Error::Parse {
            line: 0,
            column: 0,
            message: format!("AE checkpoint metadata: {e}"),
        })?;
        let mut model = Self::new(meta.config.clone(), ck.seed)?;
        ck.restore_into(&mut model.params)?;
        model.set_input_scale(meta.input_scale)?;
        Ok((model, meta))
    }

    pub fn freeze(self) -> FrozenAutoencoder {
        let hash = self.params.content_hash();
        FrozenAutoencoder { inner: self, hash }
    }
}

/// An autoencoder whose parameters can no longer change.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenAutoencoder {
    inner: RnnAutoencoder,
    hash: String,
}

impl FrozenAutoencoder {
    /// Parameter hash taken at freeze time.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}

impl Deref for FrozenAutoencoder {
    type Target = RnnAutoencoder;

    fn deref(&self) -> &RnnAutoencoder {
        &self.inner
    }
}

/// Root-mean-square displacement component, used to scale AE inputs.
pub fn displacement_scale(futures: &[Vec<Point>]) -> f64 {
    let (sum, n) = futures
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), d| (s + d[0] * d[0] + d[1] * d[1], n + 2));
    if n == 0 {
        return 1.0;
    }
    let rms = (sum / n as f64).sqrt();
    if rms > 1e-12 {
        rms
    } else {
        1.0
    }
}

pub(crate) fn future_displacements(situations: &[Situation]) -> Result<Vec<Vec<Point>>> {
    situations
        .iter()
        .map(|s| Ok(to_displacements(&s.future, s.current_position())?.deltas))
        .collect()
}

/// Trains a fresh autoencoder on `data` (already balanced) and freezes it.
pub fn train_autoencoder(data: &[Situation], config: AeConfig, phase: &PhaseConfig, adam: AdamConfig, seed: u64) -> Result<(FrozenAutoencoder, Vec<EpochRecord>)> {
    let mut model = RnnAutoencoder::new(config, seed)?;
    let mut history = Vec::new();
    fit_autoencoder(&mut model, data, phase, adam, seed, &mut history, None, |_, _, _| Ok(()))?;
    Ok((model.freeze(), history))
}

/// Continues training `model`; `adam` resumes optimizer state when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_autoencoder<A>(
    model: &mut RnnAutoencoder,
    data: &[Situation],
    phase: &PhaseConfig,
    adam_cfg: AdamConfig,
    seed: u64,
    history: &mut Vec<EpochRecord>,
    adam: Option<Adam>,
    mut after_epoch: A,
) -> Result<()>
where
    A: FnMut(&RnnAutoencoder, &Adam, &[EpochRecord]) -> Result<()>,
{
    phase.validate("ae_phase")?;
    let futures = future_displacements(data)?;
    if history.is_empty() {
        model.set_input_scale(displacement_scale(&futures))?;
    }
    let mut adam = adam.unwrap_or_else(|| Adam::new(AdamConfig { lr: phase.lr, ..adam_cfg }, &model.params));
    let runner = Phase {
        name: "rnn_ae",
        cfg: phase,
        seed,
        n_items: futures.len(),
    };
    let refs: Vec<&[Point]> = futures.iter().map(Vec::as_slice).collect();
    let mut params = std::mem::take(&mut model.params);
    let shell = model.clone();
    let result = runner.run(
        &mut params,
        &mut adam,
        history,
        |store, idx, _| {
            let batch: Vec<&[Point]> = idx.iter().map(|&i| refs[i]).collect();
            shell.loss_graph(store, &batch)
        },
        |store| mean_loss(&shell, store, &refs),
        |store, adam, h| {
            let mut snapshot = shell.clone();
            snapshot.params = store.clone();
            after_epoch(&snapshot, adam, h)
        },
    );
    model.params = params;
    result
}

/// Mean reconstruction loss over all items, evaluated in fixed chunks.
fn mean_loss(model: &RnnAutoencoder, store: &ParamStore, futures: &[&[Point]]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in futures.chunks(256) {
        let (g, l) = model.loss_graph(store, chunk)?;
        total += g.scalar(l) * chunk.len() as f64;
    }
    Ok(total / futures.len() as f64)
}

/// Reconstruction quality over a set of situations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// Mean Euclidean error between reconstructed and true displacements.
    pub mean_step_error: f64,
    /// Mean Euclidean length of the true displacements.
    pub mean_step_magnitude: f64,
    pub ratio: f64,
    /// Mean position error after integrating displacements.
    pub ade: f64,
    pub count: usize,
}

pub fn reconstruction_report(ae: &RnnAutoencoder, situations: &[Situation]) -> Result<ReconstructionReport> {
    if situations.is_empty() {
        return Err(Error::InvalidInput("no situations to reconstruct".into()));
    }
    let futures = future_displacements(situations)?;
    let (mut err, mut mag, mut ade, mut steps) = (0.0, 0.0, 0.0, 0usize);
    for (chunk, sits) in futures.chunks(256).zip(situations.chunks(256)) {
        let refs: Vec<&[Point]> = chunk.iter().map(Vec::as_slice).collect();
        let enc = ae.encode_batch(&refs)?;
        let recon = ae.decode_batch(&enc)?;
        for ((truth, rec), s) in chunk.iter().zip(&recon).zip(sits) {
            for (a, b) in truth.iter().zip(rec) {
                err += (a[0] - b[0]).hypot(a[1] - b[1]);
                mag += a[0].hypot(a[1]);
            }
            let positions = from_displacements(&DisplacementSeries {
                origin: s.current_position(),
                deltas: rec.clone(),
            })?;
            ade += positions
                .iter()
                .zip(&s.future)
                .map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1]))
                .sum::<f64>();
            steps += truth.len();
        }
    }
    let n = steps as f64;
    let (mean_step_error, mean_step_magnitude) = (err / n, mag / n);
    Ok(ReconstructionReport {
        mean_step_error,
        mean_step_magnitude,
        ratio: mean_step_error / mean_step_magnitude,
        ade: ade / n,
        count: situations.len(),
    })
}

/// Row-wise encodings of each situation's future.
pub fn encode_situations(ae: &RnnAutoencoder, situations: &[Situation]) -> Result<Array2<f64>> {
    let futures = future_displacements(situations)?;
    let mut out = Array2::zeros((0, ae.config.enc_size));
    for chunk in futures.chunks(256) {
        let refs: Vec<&[Point]> = chunk.iter().map(Vec::as_slice).collect();
        out.append(Axis(0), ae.encode_batch(&refs)?.view())
            .expect("encoding widths agree");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;

    fn small_future(t: usize, k: f64) -> Vec<Point> {
        (0..t).map(|i| [0.5 + 0.1 * (i as f64 * k).sin(), 0.05 * i as f64 * k]).collect()
    }

    #[test]
    fn shapes() {
        let ae = RnnAutoencoder::new(AeConfig::with_horizon(14), 1).unwrap();
        let f = small_future(14, 0.3);
        let enc = ae.encode(&DisplacementSeries { origin: [0.0, 0.0], deltas: f }).unwrap();
        assert_eq!(enc.len(), 4);
        assert_eq!(ae.decode(&enc).unwrap().len(), 14);
        let ae22 = RnnAutoencoder::new(AeConfig::with_horizon(22), 1).unwrap();
        assert_eq!(ae22.decode(&[0.1, 0.2, 0.3, 0.4]).unwrap().len(), 22);
    }

    #[test]
    fn wrong_length_is_shape_error() {
        let ae = RnnAutoencoder::new(AeConfig::with_horizon(14), 1).unwrap();
        let f = small_future(13, 0.3);
        assert!(matches!(ae.encode_batch(&[&f]), Err(Error::Shape(_))));
        assert!(matches!(ae.decode(&[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_encoding_rejected() {
        let ae = RnnAutoencoder::new(AeConfig::with_horizon(5), 1).unwrap();
        assert!(matches!(ae.decode(&[0.0, f64::NAN, 0.0, 0.0]), Err(Error::Numerical(_))));
    }

    #[test]
    fn zero_weights_give_zero_encoding() {
        let mut ae = RnnAutoencoder::new(AeConfig::with_horizon(6), 1).unwrap();
        for t in ae.params_mut().iter_mut() {
            t.values.fill(0.0);
        }
        let zeros = vec![[0.0, 0.0]; 6];
        let enc = ae.encode_batch(&[&zeros]).unwrap();
        assert!(enc.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_futures_identical_encodings() {
        let ae = RnnAutoencoder::new(AeConfig::with_horizon(8), 4).unwrap();
        let f = small_future(8, 0.7);
        let g = f.clone();
        let enc = ae.encode_batch(&[&f, &g]).unwrap();
        assert_eq!(enc.row(0), enc.row(1));
    }

    #[test]
    fn hidden_must_match_encoding() {
        let cfg = AeConfig {
            gru_hidden_size: 5,
            ..AeConfig::with_horizon(4)
        };
        assert!(matches!(RnnAutoencoder::new(cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // One GRU layer keeps every gradient well above finite-difference
        // roundoff; the deep stack is checked on its own in `nn`.
        let cfg = AeConfig {
            gru_num_layers: 1,
            ..AeConfig::with_horizon(5)
        };
        let mut ae = RnnAutoencoder::new(cfg, 2).unwrap();
        ae.set_input_scale(0.7).unwrap();
        let futures = [small_future(5, 0.4), small_future(5, -1.1)];
        let refs: Vec<&[Point]> = futures.iter().map(Vec::as_slice).collect();
        let mut store = ae.params().clone();
        let (g, l) = ae.loss_graph(&store, &refs).unwrap();
        g.backward(l, &mut store).unwrap();
        let report = finite_diff_check(
            &mut store,
            |s| {
                let (g, l) = ae.loss_graph(s, &refs).unwrap();
                g.scalar(l)
            },
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut ae = RnnAutoencoder::new(AeConfig::with_horizon(5), 3).unwrap();
        ae.set_input_scale(0.4).unwrap();
        let ck = ae.to_checkpoint(None, 3, &[], true);
        let (back, meta) = RnnAutoencoder::from_checkpoint(&ck).unwrap();
        assert_eq!(back, ae);
        assert!(meta.complete);
        assert_eq!(back.freeze().hash(), ae.params().content_hash());
    }
}
