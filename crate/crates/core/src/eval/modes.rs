use serde::{Deserialize, Serialize};

use crate::data::{ground_truth_mode_probs, same_past, ModeTemplate, Point, SceneKind, SceneSpec, Situation};
use crate::error::{Error, Result};
use crate::predictor::TrajFlow;
use crate::rng::Rng;

use super::gaussian::log_sum_exp;

/// Mean per-step Euclidean distance between two equally long point sequences.
pub fn mean_step_distance(a: &[Point], b: &[Point]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / n as f64
}

/// Index of the continuation nearest to `future`; ties go to the lower index.
pub fn classify_mode(future: &[Point], continuations: &[Vec<Point>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (m, c) in continuations.iter().enumerate() {
        let d = mean_step_distance(future, c);
        if d < best_d {
            best_d = d;
            best = m;
        }
    }
    best
}

/// Scene-aware classifier: bimodal futures are compared with the polyline
/// templates, branching futures with each path's continuation from the
/// window's start step.
#[derive(Debug, Clone)]
pub struct ModeClassifier {
    kind: SceneKind,
    templates: Vec<Vec<Point>>,
    t_pred: usize,
}

impl ModeClassifier {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        let templates = match spec.kind {
            SceneKind::Branching => spec.branch_paths()?,
            SceneKind::Bimodal => spec
                .mode_templates
                .iter()
                .enumerate()
                .map(|(i, t)| match t {
                    ModeTemplate::Polyline { points } => Ok(points.clone()),
                    ModeTemplate::Branch { .. } => {
                        Err(Error::config(format!("mode_templates[{i}]"), "expected a polyline template"))
                    }
                })
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            kind: spec.kind,
            templates,
            t_pred: spec.t_pred,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.templates.len()
    }

    /// Continuations to compare against for a window starting at `step`.
    pub fn continuations(&self, step: Option<usize>) -> Result<Vec<Vec<Point>>> {
        match self.kind {
            SceneKind::Bimodal => Ok(self.templates.clone()),
            SceneKind::Branching => {
                let step = step.ok_or_else(|| Error::InvalidInput("branching window without a step".into()))?;
                self.templates
                    .iter()
                    .map(|p| {
                        p.get(step..step + self.t_pred)
                            .map(<[Point]>::to_vec)
                            .ok_or_else(|| Error::InvalidInput(format!("step {step} runs past the template")))
                    })
                    .collect()
            }
        }
    }

    pub fn classify(&self, future: &[Point], step: Option<usize>) -> Result<usize> {
        Ok(classify_mode(future, &self.continuations(step)?))
    }
}

/// Predicted mode masses: (self-normalized likelihood sum, empirical fraction).
pub fn mode_masses(log_likelihoods: &[f64], labels: &[usize], n_modes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if log_likelihoods.len() != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!("{} likelihoods for {} labels", log_likelihoods.len(), labels.len())));
    }
    let z = log_sum_exp(log_likelihoods);
    if !z.is_finite() {
        return Err(Error::Numerical("likelihoods do not normalize".into()));
    }
    let mut lik = vec![0.0; n_modes];
    let mut emp = vec![0.0; n_modes];
    for (&l, &m) in log_likelihoods.iter().zip(labels) {
        if m >= n_modes {
            return Err(Error::InvalidInput(format!("mode label {m} out of range")));
        }
        lik[m] += (l - z).exp();
        emp[m] += 1.0 / labels.len() as f64;
    }
    Ok((lik, emp))
}

/// Per-window ground truth, predicted masses and absolute errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMle {
    pub step: Option<usize>,
    pub ground_truth: Vec<f64>,
    pub likelihood_mass: Vec<f64>,
    pub empirical_mass: Vec<f64>,
    pub likelihood_error: Vec<f64>,
    pub empirical_error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mode: String,
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleResult {
    pub n_samples: usize,
    pub windows: Vec<WindowMle>,
    /// Primary figure: errors of the likelihood-sum estimator.
    pub likelihood: Vec<ErrorStats>,
    pub empirical: Vec<ErrorStats>,
}

fn stats(names: &[String], windows: &[WindowMle], pick: fn(&WindowMle) -> &[f64]) -> Vec<ErrorStats> {
    names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let vals: Vec<f64> = windows.iter().map(|w| pick(w)[m]).collect();
            ErrorStats {
                mode: name.clone(),
                min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                avg: vals.iter().sum::<f64>() / vals.len() as f64,
                max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Distinct pasts of `pool`, in order of first appearance.
pub fn distinct_windows(pool: &[Situation]) -> Vec<&Situation> {
    let mut out: Vec<&Situation> = Vec::new();
    for s in pool {
        if !out.iter().any(|o| same_past(&o.past, &s.past)) {
            out.push(s);
        }
    }
    out
}

/// Mode likelihood error over every distinct window of `pool`.
pub fn mode_likelihood_error(
    model: &TrajFlow,
    pool: &[Situation],
    spec: &SceneSpec,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<MleResult> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be positive".into()));
    }
    let classifier = ModeClassifier::new(spec)?;
    let n_modes = classifier.n_modes();
    let windows = distinct_windows(pool);
    if windows.is_empty() {
        return Err(Error::InvalidInput("empty situation pool".into()));
    }
    let mut out = Vec::with_capacity(windows.len());
    for w in windows {
        let gt = ground_truth_mode_probs(pool, &w.past, n_modes)?;
        let preds = model.predict_trajectories(&w.past, n_samples, rng)?;
        let continuations = classifier.continuations(w.step)?;
        let labels: Vec<usize> = preds.iter().map(|p| classify_mode(&p.points, &continuations)).collect();
        let lls: Vec<f64> = preds.iter().map(|p| p.log_likelihood).collect();
        let (lik, emp) = mode_masses(&lls, &labels, n_modes)?;
        out.push(WindowMle {
            step: w.step,
            likelihood_error: gt.iter().zip(&lik).map(|(g, p)| (g - p).abs()).collect(),
            empirical_error: gt.iter().zip(&emp).map(|(g, p)| (g - p).abs()).collect(),
            ground_truth: gt,
            likelihood_mass: lik,
            empirical_mass: emp,
        });
    }
    Ok(MleResult {
        n_samples,
        likelihood: stats(&spec.mode_names, &out, |w| &w.likelihood_error),
        empirical: stats(&spec.mode_names, &out, |w| &w.empirical_error),
        windows: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{bundled_scene, generate};

    #[test]
    fn template_classifies_as_itself() {
        let spec = bundled_scene("bimodal_sigma010").unwrap();
        let c = ModeClassifier::new(&spec).unwrap();
        for m in 0..2 {
            let t = c.continuations(None).unwrap()[m].clone();
            assert_eq!(c.classify(&t, None).unwrap(), m);
        }
    }

    #[test]
    fn midpoint_goes_to_lower_index() {
        let a = vec![[0.0, 1.0], [0.0, 2.0]];
        let b = vec![[0.0, -1.0], [0.0, -2.0]];
        let mid = vec![[0.0, 0.0], [0.0, 0.0]];
        assert_eq!(classify_mode(&mid, &[a.clone(), b.clone()]), 0);
        assert_eq!(classify_mode(&mid, &[b, a]), 0);
    }

    #[test]
    fn branching_labels_recovered() {
        for name in ["branching_scene1", "branching_scene3", "branching_scene5"] {
            let spec = bundled_scene(name).unwrap();
            let c = ModeClassifier::new(&spec).unwrap();
            let data = generate(&spec).unwrap();
            let agree = data
                .iter()
                .filter(|s| c.classify(&s.future, s.step).unwrap() == s.mode_label.unwrap())
                .count();
            assert!(agree as f64 >= 0.99 * data.len() as f64, "{name}: {agree}/{}", data.len());
        }
    }

    #[test]
    fn bimodal_labels_recovered() {
        let spec = bundled_scene("bimodal_sigma015").unwrap();
        let c = ModeClassifier::new(&spec).unwrap();
        let data = generate(&spec).unwrap();
        assert!(data.iter().all(|s| c.classify(&s.future, None).unwrap() == s.mode_label.unwrap()));
    }

    #[test]
    fn masses_sum_to_one() {
        let lls = [-1.0, 2.0, 0.5, -30.0, 1.0];
        let labels = [0, 2, 2, 1, 0];
        let (lik, emp) = mode_masses(&lls, &labels, 3).unwrap();
        assert!((lik.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((emp.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(emp, vec![0.4, 0.2, 0.4]);
        let z: f64 = lls.iter().map(|v: &f64| v.exp()).sum();
        assert!((lik[0] - ((-1.0f64).exp() + 1.0f64.exp()) / z).abs() < 1e-12);
    }

    #[test]
    fn absolute_error_example() {
        // GT 0.5 against a predicted mass of 0.4
        let (lik, _) = mode_masses(&[0.4f64.ln(), 0.6f64.ln()], &[0, 1], 2).unwrap();
        assert!(((0.5 - lik[0]).abs() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn distinct_windows_dedupe_shared_pasts() {
        let spec = bundled_scene("branching_scene1").unwrap();
        let data = generate(&spec).unwrap();
        let w = distinct_windows(&data);
        let paths = spec.branch_paths().unwrap();
        // brute force: distinct (mode-path, step) pasts
        let mut expect: Vec<Vec<Point>> = Vec::new();
        for p in &paths {
            for step in spec.t_past..spec.t_past + spec.window_steps.unwrap() {
                let past = p[step - spec.t_past..step].to_vec();
                if !expect.iter().any(|e| same_past(e, &past)) {
                    expect.push(past);
                }
            }
        }
        assert_eq!(w.len(), expect.len());
    }
}
