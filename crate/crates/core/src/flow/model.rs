use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::spline::{inverse_batch, raw_params_per_dim, SplineOp};
use crate::autodiff::{Checkpoint, Graph, ParamStore, Var};
use crate::data::Point;
use crate::error::{Error, Result};
use crate::nn::{BoundGru, BoundLinear, Gru, Linear};
use crate::rng::{sha256_hex, substream, Rng};

pub const FLOW_COMPONENT: &str = "flow";

/// How the past observation is fed to the context network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastInput {
    /// Consecutive differences of the past positions.
    Displacements,
    /// The past positions themselves.
    Positions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of coupling layers, each preceded by a fixed permutation.
    pub n_layers: usize,
    pub latent_dim: usize,
    pub bins: usize,
    pub tail_bound: f64,
    pub context_dim: usize,
    pub hidden: Vec<usize>,
    pub past_input: PastInput,
    pub t_past: usize,
}

impl FlowConfig {
    pub fn new(latent_dim: usize, t_past: usize, past_input: PastInput) -> Self {
        Self {
            n_layers: 10,
            latent_dim,
            bins: 8,
            tail_bound: 3.0,
            context_dim: 16,
            hidden: vec![32, 32],
            past_input,
            t_past,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("flow.{f}"), m));
        if self.latent_dim < 2 {
            return bad("latent_dim", "coupling layers need at least 2 dimensions");
        }
        if self.bins == 0 {
            return bad("bins", "must be at least 1");
        }
        if !(self.tail_bound > 0.0 && self.tail_bound.is_finite()) {
            return bad("tail_bound", "must be positive");
        }
        if self.context_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden", "layer sizes must be positive");
        }
        let min_past = match self.past_input {
            PastInput::Displacements => 2,
            PastInput::Positions => 1,
        };
        if self.t_past < min_past {
            return bad("t_past", "past is too short for the chosen input");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn split(&self) -> (usize, usize) {
        let keep = self.latent_dim / 2;
        (keep, self.latent_dim - keep)
    }
}

/// Per-dimension affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits column means and standard deviations; near-constant columns keep scale one.
    pub fn fit(rows: &Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(Error::InvalidInput("cannot standardize an empty set".into()));
        }
        let mean = rows.mean_axis(Axis(0)).expect("non-empty");
        let std = rows.std_axis(Axis(0), 0.0);
        Ok(Self {
            mean: mean.to_vec(),
            std: std.iter().map(|&s| if s > 1e-8 { s } else { 1.0 }).collect(),
        })
    }

    pub fn apply(&self, rows: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(rows.raw_dim(), |(r, c)| (rows[[r, c]] - self.mean[c]) / self.std[c])
    }

    pub fn invert(&self, rows: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(rows.raw_dim(), |(r, c)| rows[[r, c]] * self.std[c] + self.mean[c])
    }

    /// `log |d apply / dx|`.
    pub fn log_det(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Coupling {
    hidden: Vec<Linear>,
    out: Linear,
}

struct BoundCoupling {
    hidden: Vec<BoundLinear>,
    out: BoundLinear,
}

struct Bound {
    ctx: BoundGru,
    layers: Vec<BoundCoupling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMetadata {
    pub config: FlowConfig,
    pub permutations: Vec<Vec<usize>>,
    pub latent_norm: Standardizer,
    pub past_norm: Standardizer,
    pub ae_hash: String,
    #[serde(default)]
    pub ae_checkpoint: Option<String>,
    pub history: Vec<crate::training::EpochRecord>,
    pub complete: bool,
}

/// Conditional flow mapping standardized encodings to a standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    params: ParamStore,
    ctx_gru: Gru,
    layers: Vec<Coupling>,
    perms: Vec<Vec<usize>>,
    latent_norm: Standardizer,
    past_norm: Standardizer,
}

impl FlowModel {
    /// A model whose every coupling starts as the identity.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "flow.init");
        let mut params = ParamStore::new();
        let ctx_gru = Gru::new(&mut params, "ctx.gru", 2, config.context_dim, 1, &mut rng);
        let (keep, change) = config.split();
        let raw_out = change * raw_params_per_dim(config.bins);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut width = keep + config.context_dim;
            let mut hidden = Vec::new();
            for (h, &size) in config.hidden.iter().enumerate() {
                hidden.push(Linear::new(&mut params, &format!("layer{l}.h{h}"), width, size, &mut rng));
                width = size;
            }
            let out = Linear::zeros(&mut params, &format!("layer{l}.out"), width, raw_out);
            layers.push(Coupling { hidden, out });
        }
        let mut perm_rng = substream(seed, "flow.permutations");
        let perms = (0..config.n_layers)
            .map(|_| {
                let mut p: Vec<usize> = (0..config.latent_dim).collect();
                p.shuffle(&mut perm_rng);
                p
            })
            .collect();
        Ok(Self {
            latent_norm: Standardizer::identity(config.latent_dim),
            past_norm: Standardizer::identity(2),
            config,
            params,
            ctx_gru,
            layers,
            perms,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn latent_norm(&self) -> &Standardizer {
        &self.latent_norm
    }

    pub fn past_norm(&self) -> &Standardizer {
        &self.past_norm
    }

    pub fn set_latent_norm(&mut self, norm: Standardizer) -> Result<()> {
        if norm.mean.len() != self.config.latent_dim || norm.std.len() != self.config.latent_dim {
            return Err(Error::Shape("latent standardizer width".into()));
        }
        self.latent_norm = norm;
        Ok(())
    }

    /// Fits the latent and past standardizers from training data.
    pub fn fit_normalizers(&mut self, encodings: &Array2<f64>, pasts: &[Vec<Point>]) -> Result<()> {
        self.set_latent_norm(Standardizer::fit(encodings)?)?;
        let raw: Vec<Point> = pasts
            .iter()
            .map(|p| self.raw_past_features(p))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let rows = Array2::from_shape_fn((raw.len(), 2), |(r, c)| raw[r][c]);
        self.past_norm = Standardizer::fit(&rows)?;
        Ok(())
    }

    fn raw_past_features(&self, past: &[Point]) -> Result<Vec<Point>> {
        if past.len() != self.config.t_past {
            return Err(Error::Shape(format!(
                "past has {} points, model expects {}",
                past.len(),
                self.config.t_past
            )));
        }
        if !crate::data::all_finite(past) {
            return Err(Error::InvalidInput("past has non-finite coordinates".into()));
        }
        Ok(match self.config.past_input {
            PastInput::Positions => past.to_vec(),
            PastInput::Displacements => past.windows(2).map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1]]).collect(),
        })
    }

    /// Standardized context-network inputs for one past observation.
    pub fn past_features(&self, past: &[Point]) -> Result<Vec<Point>> {
        let n = &self.past_norm;
        Ok(self
            .raw_past_features(past)?
            .into_iter()
            .map(|p| [(p[0] - n.mean[0]) / n.std[0], (p[1] - n.mean[1]) / n.std[1]])
            .collect())
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore) -> Bound {
        Bound {
            ctx: self.ctx_gru.bind(g, store),
            layers: self
                .layers
                .iter()
                .map(|c| BoundCoupling {
                    hidden: c.hidden.iter().map(|l| l.bind(g, store)).collect(),
                    out: c.out.bind(g, store),
                })
                .collect(),
        }
    }

    fn context_on(&self, g: &mut Graph, b: &Bound, features: &[&[Point]]) -> Var {
        let steps = features[0].len();
        let mut state = b.ctx.zero_state(g, features.len());
        let mut h = state[0];
        for t in 0..steps {
            let x = g.input(Array2::from_shape_fn((features.len(), 2), |(r, c)| features[r][t][c]));
            h = b.ctx.step(g, x, &mut state);
        }
        h
    }

    fn conditioner(g: &mut Graph, layer: &BoundCoupling, keep: Var, ctx: Var) -> Var {
        let mut h = g.concat_cols(&[keep, ctx]);
        for l in &layer.hidden {
            let a = l.forward(g, h);
            h = g.tanh(a);
        }
        layer.out.forward(g, h)
    }

    /// Normalizing direction on standardized inputs; returns `z` and the
    /// per-row log-determinant (a column).
    fn forward_on(&self, g: &mut Graph, b: &Bound, u: Var, ctx: Var) -> (Var, Option<Var>) {
        let (keep, change) = self.config.split();
        let mut z = u;
        let mut logdet: Option<Var> = None;
        for (layer, perm) in b.layers.iter().zip(&self.perms) {
            let p = g.select_cols(z, perm);
            let za = g.slice_cols(p, 0, keep);
            let zb = g.slice_cols(p, keep, change);
            let raw = Self::conditioner(g, layer, za, ctx);
            let (value, op) = SplineOp::forward(g.value(zb), g.value(raw), self.config.bins, self.config.tail_bound);
            let out = g.custom(&[zb, raw], value, Box::new(op));
            let yb = g.slice_cols(out, 0, change);
            let ld = g.slice_cols(out, change, 1);
            z = g.concat_cols(&[za, yb]);
            logdet = Some(match logdet {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
        }
        (z, logdet)
    }

    /// Log-density column of standardized rows `u` (without the
    /// standardization term).
    fn standardized_log_prob_on(&self, g: &mut Graph, b: &Bound, u: Var, ctx: Var) -> Var {
        let d = self.config.latent_dim as f64;
        let (z, logdet) = self.forward_on(g, b, u, ctx);
        let sq = g.square(z);
        let ss = g.sum_cols(sq);
        let base = g.scale(ss, -0.5);
        let base = g.offset(base, -0.5 * d * (2.0 * PI).ln());
        match logdet {
            Some(ld) => g.add(base, ld),
            None => base,
        }
    }

    fn check_rows(&self, rows: &Array2<f64>, n_pasts: usize) -> Result<()> {
        if rows.ncols() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "encoding has {} entries, flow expects {}",
                rows.ncols(),
                self.config.latent_dim
            )));
        }
        if rows.nrows() != n_pasts || n_pasts == 0 {
            return Err(Error::Shape(format!("{} encodings for {n_pasts} pasts", rows.nrows())));
        }
        Ok(())
    }

    /// Log-density graph of raw encodings given standardized past features.
    ///
    /// `noise` (in standardized units) is added to the inputs when given;
    /// training uses it, evaluation never does.
    pub fn log_prob_graph(
        &self,
        store: &ParamStore,
        encodings: &Array2<f64>,
        features: &[&[Point]],
        noise: Option<(f64, &mut Rng)>,
    ) -> Result<(Graph, Var)> {
        self.check_rows(encodings, features.len())?;
        let mut u = self.latent_norm.apply(encodings);
        if let Some((scale, rng)) = noise {
            if scale > 0.0 {
                u.mapv_inplace(|v| {
                    let e: f64 = StandardNormal.sample(rng);
                    v + scale * e
                });
            }
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, store);
        let ctx = self.context_on(&mut g, &b, features);
        let uv = g.input(u);
        let lp = self.standardized_log_prob_on(&mut g, &b, uv, ctx);
        let lp = g.offset(lp, self.latent_norm.log_det());
        Ok((g, lp))
    }

    /// Log-densities of raw encodings, one per row, given standardized past features.
    pub fn log_prob_features(&self, encodings: &Array2<f64>, features: &[&[Point]]) -> Result<Vec<f64>> {
        let (g, lp) = self.log_prob_graph(&self.params, encodings, features, None)?;
        let out: Vec<f64> = g.value(lp).column(0).to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite log-density".into()));
        }
        Ok(out)
    }

    /// Log-density of raw encodings, each paired with its past observation.
    pub fn log_prob_batch(&self, encodings: &Array2<f64>, pasts: &[&[Point]]) -> Result<Vec<f64>> {
        let feats: Vec<Vec<Point>> = pasts.iter().map(|p| self.past_features(p)).collect::<Result<_>>()?;
        let refs: Vec<&[Point]> = feats.iter().map(Vec::as_slice).collect();
        self.log_prob_features(encodings, &refs)
    }

    pub fn log_prob(&self, encoding: &[f64], past: &[Point]) -> Result<f64> {
        let row = Array2::from_shape_vec((1, encoding.len()), encoding.to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(self.log_prob_batch(&row, &[past])?[0])
    }

    /// Context vectors for standardized past features, one row each.
    pub fn context_features(&self, features: &[&[Point]]) -> Array2<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.params);
        let ctx = self.context_on(&mut g, &b, features);
        g.value(ctx).clone()
    }

    pub fn context(&self, past: &[Point]) -> Result<Array2<f64>> {
        let f = self.past_features(past)?;
        Ok(self.context_features(&[&f]))
    }

    /// Normalizing direction on standardized rows with explicit context
    /// rows; returns the base-space rows and per-row log-determinants.
    pub fn transform(&self, u: &Array2<f64>, ctx: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_ctx(u, ctx)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.params);
        let uv = g.input(u.clone());
        let cv = g.input(ctx.clone());
        let (z, ld) = self.forward_on(&mut g, &b, uv, cv);
        let ld = ld.map_or_else(|| vec![0.0; u.nrows()], |v| g.value(v).column(0).to_vec());
        Ok((g.value(z).clone(), ld))
    }

    /// Generative direction: maps base-space rows back to standardized rows.
    /// The returned log-determinants are those of the inverse map.
    pub fn inverse_transform(&self, z: &Array2<f64>, ctx: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_ctx(z, ctx)?;
        let (keep, change) = self.config.split();
        let n = z.nrows();
        let mut g = Graph::new();
        let b = self.bind(&mut g, &self.params);
        let cv = g.input(ctx.clone());
        let mut cur = z.clone();
        let mut logdet = vec![0.0; n];
        for (layer, perm) in b.layers.iter().zip(&self.perms).rev() {
            let za = cur.slice(ndarray::s![.., ..keep]).to_owned();
            let yb = cur.slice(ndarray::s![.., keep..]).to_owned();
            let zv = g.input(za.clone());
            let raw = Self::conditioner(&mut g, layer, zv, cv);
            let (xb, ld) = inverse_batch(&yb, g.value(raw), self.config.bins, self.config.tail_bound);
            for (acc, l) in logdet.iter_mut().zip(ld) {
                *acc += l;
            }
            // Undo the permutation: column j of the permuted rows came from perm[j].
            let mut prev = Array2::zeros((n, keep + change));
            for (j, &src) in perm.iter().enumerate() {
                let col = if j < keep { za.column(j) } else { xb.column(j - keep) };
                prev.column_mut(src).assign(&col);
            }
            cur = prev;
        }
        Ok((cur, logdet))
    }

    fn check_ctx(&self, rows: &Array2<f64>, ctx: &Array2<f64>) -> Result<()> {
        if rows.ncols() != self.config.latent_dim || ctx.ncols() != self.config.context_dim || ctx.nrows() != rows.nrows() {
            return Err(Error::Shape(format!(
                "rows {:?} / context {:?} do not match the flow",
                rows.dim(),
                ctx.dim()
            )));
        }
        Ok(())
    }

    /// Draws `n` raw encodings for one past with their exact log-densities.
    pub fn sample(&self, n: usize, past: &[Point], rng: &mut Rng) -> Result<(Array2<f64>, Vec<f64>)> {
        if n == 0 {
            return Err(Error::InvalidInput("sample count must be at least 1".into()));
        }
        let ctx_row = self.context(past)?;
        let ctx = ctx_row.broadcast((n, self.config.context_dim)).expect("one context row").to_owned();
        let d = self.config.latent_dim;
        let z = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng));
        let (u, inv_ld) = self.inverse_transform(&z, &ctx)?;
        let base_const = -0.5 * d as f64 * (2.0 * PI).ln();
        let log_p: Vec<f64> = z
            .outer_iter()
            .zip(&inv_ld)
            .map(|(row, ld)| base_const - 0.5 * row.dot(&row) - ld + self.latent_norm.log_det())
            .collect();
        if log_p.iter().any(|v| !v.is_finite()) || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite sample".into()));
        }
        Ok((self.latent_norm.invert(&u), log_p))
    }

    pub fn metadata(&self, ae_hash: &str, ae_checkpoint: Option<String>, history: &[crate::training::EpochRecord], complete: bool) -> FlowMetadata {
        FlowMetadata {
            config: self.config.clone(),
            permutations: self.perms.clone(),
            latent_norm: self.latent_norm.clone(),
            past_norm: self.past_norm.clone(),
            ae_hash: ae_hash.to_string(),
            ae_checkpoint,
            history: history.to_vec(),
            complete,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, FlowMetadata)> {
        if ck.component != FLOW_COMPONENT {
            return Err(Error::InvalidInput(format!("checkpoint component is {}, expected {FLOW_COMPONENT}", ck.component)));
        }
        let meta: FlowMetadata = serde_json::from_value(ck.metadata.clone()).map_err(|e| Error::Parse {
            line: 0,
            column: 0,
            message: format!("flow checkpoint metadata: {e}"),
        })?;
        let mut model = Self::new(meta.config.clone(), ck.seed)?;
        ck.restore_into(&mut model.params)?;
        let valid_perm = |p: &Vec<usize>| {
            let mut s = p.clone();
            s.sort_unstable();
            s == (0..model.config.latent_dim).collect::<Vec<_>>()
        };
        if meta.permutations.len() != model.config.n_layers || !meta.permutations.iter().all(valid_perm) {
            return Err(Error::InvalidInput("checkpoint permutations are not bijections".into()));
        }
        model.perms = meta.permutations.clone();
        model.set_latent_norm(meta.latent_norm.clone())?;
        if meta.past_norm.mean.len() != 2 || meta.past_norm.std.len() != 2 {
            return Err(Error::Shape("past standardizer width".into()));
        }
        model.past_norm = meta.past_norm.clone();
        Ok((model, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::Rng as _;

    fn past(n: usize) -> Vec<Point> {
        (0..n).map(|i| [i as f64 * 0.9 - 5.0, 0.1 * (i as f64).sin()]).collect()
    }

    pub(crate) fn randomize(model: &mut FlowModel, seed: u64, scale: f64) {
        let mut rng = substream(seed, "randomize");
        for t in model.params_mut().iter_mut() {
            t.values.mapv_inplace(|v| v + scale * rng.random_range(-1.0..1.0));
        }
    }

    #[test]
    fn identity_model_is_standard_normal() {
        let model = FlowModel::new(FlowConfig::new(4, 10, PastInput::Displacements), 1).unwrap();
        let lp = model.log_prob(&[0.0; 4], &past(10)).unwrap();
        assert!((lp + 2.0 * (2.0 * PI).ln()).abs() < 1e-12, "{lp}");
        let y = [0.3, -1.2, 2.2, 0.05];
        let lp = model.log_prob(&y, &past(10)).unwrap();
        let expected = -2.0 * (2.0 * PI).ln() - 0.5 * y.iter().map(|v| v * v).sum::<f64>();
        assert!((lp - expected).abs() < 1e-9);
    }

    #[test]
    fn wrong_past_length_is_shape_error() {
        let model = FlowModel::new(FlowConfig::new(4, 10, PastInput::Positions), 1).unwrap();
        assert!(matches!(model.log_prob(&[0.0; 4], &past(9)), Err(Error::Shape(_))));
        assert!(matches!(model.log_prob(&[0.0; 3], &past(10)), Err(Error::Shape(_))));
    }

    #[test]
    fn coupling_keeps_identity_half() {
        let mut model = FlowModel::new(FlowConfig { n_layers: 1, ..FlowConfig::new(4, 4, PastInput::Positions) }, 2).unwrap();
        randomize(&mut model, 3, 0.5);
        let mut rng = substream(4, "rows");
        let u = Array2::from_shape_fn((6, 4), |_| rng.random_range(-2.0..2.0));
        let ctx = Array2::from_shape_fn((6, 16), |_| rng.random_range(-1.0..1.0));
        let (z, _) = model.transform(&u, &ctx).unwrap();
        let perm = &model.permutations()[0];
        for r in 0..6 {
            for j in 0..2 {
                assert_eq!(z[[r, j]], u[[r, perm[j]]]);
            }
        }
    }

    #[test]
    fn round_trip_with_random_parameters() {
        let mut model = FlowModel::new(FlowConfig::new(4, 4, PastInput::Positions), 5).unwrap();
        randomize(&mut model, 6, 0.3);
        let mut rng = substream(7, "rows");
        let z = Array2::from_shape_fn((200, 4), |_| StandardNormal.sample(&mut rng));
        let ctx = Array2::from_shape_fn((200, 16), |_| rng.random_range(-1.0..1.0));
        let (u, inv_ld) = model.inverse_transform(&z, &ctx).unwrap();
        let (back, fwd_ld) = model.transform(&u, &ctx).unwrap();
        for (a, b) in back.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        for (a, b) in inv_ld.iter().zip(&fwd_ld) {
            assert!((a + b).abs() < 1e-8);
        }
    }

    #[test]
    fn sample_likelihoods_match_log_prob() {
        let mut model = FlowModel::new(FlowConfig::new(4, 6, PastInput::Displacements), 8).unwrap();
        randomize(&mut model, 9, 0.2);
        model
            .set_latent_norm(Standardizer {
                mean: vec![0.5, -1.0, 0.0, 2.0],
                std: vec![0.3, 2.0, 1.0, 0.7],
            })
            .unwrap();
        let p = past(6);
        let mut rng = substream(10, "sample");
        let (enc, lp) = model.sample(300, &p, &mut rng).unwrap();
        let pasts: Vec<&[Point]> = vec![&p; 300];
        let again = model.log_prob_batch(&enc, &pasts).unwrap();
        for (a, b) in lp.iter().zip(&again) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn nll_gradients_match_finite_differences() {
        let cfg = FlowConfig {
            n_layers: 3,
            bins: 4,
            hidden: vec![5],
            context_dim: 3,
            ..FlowConfig::new(4, 3, PastInput::Positions)
        };
        let mut model = FlowModel::new(cfg, 11).unwrap();
        randomize(&mut model, 12, 0.4);
        let mut rng = substream(13, "batch");
        let enc = Array2::from_shape_fn((4, 4), |_| rng.random_range(-2.0..2.0));
        let pasts: Vec<Vec<Point>> = (0..4).map(|k| (0..3).map(|i| [i as f64 * 0.3, k as f64 * 0.2 - 0.3]).collect()).collect();
        let refs: Vec<&[Point]> = pasts.iter().map(Vec::as_slice).collect();
        let loss = |s: &ParamStore| {
            let (mut g, lp) = model.log_prob_graph(s, &enc, &refs, None).unwrap();
            let m = g.mean_all(lp);
            let nll = g.scale(m, -1.0);
            (g, nll)
        };
        let mut store = model.params().clone();
        let (g, l) = loss(&store);
        g.backward(l, &mut store).unwrap();
        let report = finite_diff_check(
            &mut store,
            |s| {
                let (g, l) = loss(s);
                g.scalar(l)
            },
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = FlowModel::new(FlowConfig::new(4, 5, PastInput::Positions), 14).unwrap();
        randomize(&mut model, 15, 0.1);
        let meta = model.metadata("aehash", None, &[], true);
        let ck = Checkpoint::capture(FLOW_COMPONENT, model.params(), None, &model.config().hash(), 14, serde_json::to_value(&meta).unwrap());
        let (back, m) = FlowModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back, model);
        assert_eq!(m.ae_hash, "aehash");
    }
}
