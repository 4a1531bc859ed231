use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use super::scene::{ModeTemplate, SceneKind, SceneSpec};
use super::types::{Point, Situation};
use crate::error::{Error, Result};
use crate::rng::substream;

/// Dispatches on the scene kind.
pub fn generate(spec: &SceneSpec) -> Result<Vec<Situation>> {
    match spec.kind {
        SceneKind::Bimodal => generate_bimodal(spec),
        SceneKind::Branching => generate_branching(spec),
    }
}

/// Scales `point` about `anchor` by `s`: center, scale, shift back.
pub fn scale_about(point: Point, anchor: Point, s: f64) -> Point {
    [
        anchor[0] + s * (point[0] - anchor[0]),
        anchor[1] + s * (point[1] - anchor[1]),
    ]
}

/// Two-mode scene with a shared past and speed-scaled futures.
///
/// Each sample draws a mode from `mode_proportions` and a scale `s` from the
/// scaling distribution; the mode's future template is scaled about the
/// current position (the last past point).
pub fn generate_bimodal(spec: &SceneSpec) -> Result<Vec<Situation>> {
    spec.validate()?;
    if spec.kind != SceneKind::Bimodal || spec.mode_templates.len() != 2 {
        return Err(Error::config("mode_templates", "bimodal scenes need exactly two templates"));
    }
    let scaling = spec
        .scaling
        .ok_or_else(|| Error::config("scaling", "bimodal scenes need a scaling distribution"))?;
    let past = spec.past_template.clone().expect("validated");
    let anchor = *past.last().expect("validated");
    let templates: Vec<&Vec<Point>> = spec
        .mode_templates
        .iter()
        .map(|t| match t {
            ModeTemplate::Polyline { points } => points,
            ModeTemplate::Branch { .. } => unreachable!("validated"),
        })
        .collect();

    let mut rng = substream(spec.seed, &spec.scene_id);
    let modes = WeightedIndex::new(&spec.mode_proportions)
        .map_err(|e| Error::config("mode_proportions", e.to_string()))?;
    let scale = Normal::new(scaling.mean, scaling.std).map_err(|e| Error::config("scaling", e.to_string()))?;

    Ok((0..spec.n_samples)
        .map(|i| {
            let mode = modes.sample(&mut rng);
            let s = scale.sample(&mut rng);
            let future = templates[mode].iter().map(|&p| scale_about(p, anchor, s)).collect();
            Situation {
                scene_id: spec.scene_id.clone(),
                agent_id: i as u64,
                mode_label: Some(mode),
                past: past.clone(),
                future,
                dt: spec.dt,
                step: None,
            }
        })
        .collect())
}

/// Per-mode trajectory counts by largest remainder, so the pool matches the
/// scene proportions as closely as `n` allows. Ties go to the lower mode index.
pub fn allocate_counts(proportions: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &m in order.iter().take(n.saturating_sub(assigned)) {
        counts[m] += 1;
    }
    counts
}

/// Sliding-window situations over a pool of `n_samples` branching paths.
///
/// Every path yields `window_steps` situations whose past covers
/// `[step - t_past, step)` and whose future covers `[step, step + t_pred)`.
pub fn generate_branching(spec: &SceneSpec) -> Result<Vec<Situation>> {
    spec.validate()?;
    if spec.kind != SceneKind::Branching {
        return Err(Error::config("kind", "expected a branching scene"));
    }
    let total = spec.total_len.expect("validated");
    let windows = spec.window_steps.expect("validated");
    if windows == 0 || spec.t_past + windows - 1 + spec.t_pred > total {
        return Err(Error::InvalidInput(format!(
            "{windows} windows of {} + {} steps exceed the path length {total}",
            spec.t_past, spec.t_pred
        )));
    }
    let paths = spec.branch_paths()?;
    let counts = allocate_counts(&spec.mode_proportions, spec.n_samples);
    let mut pool: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(m, &c)| std::iter::repeat_n(m, c))
        .collect();
    pool.shuffle(&mut substream(spec.seed, &spec.scene_id));

    let mut out = Vec::with_capacity(pool.len() * windows);
    for (agent, &mode) in pool.iter().enumerate() {
        let path = &paths[mode];
        for w in 0..windows {
            let step = spec.t_past + w;
            out.push(Situation {
                scene_id: spec.scene_id.clone(),
                agent_id: agent as u64,
                mode_label: Some(mode),
                past: path[step - spec.t_past..step].to_vec(),
                future: path[step..step + spec.t_pred].to_vec(),
                dt: spec.dt,
                step: Some(step),
            });
        }
    }
    Ok(out)
}

const PAST_MATCH_TOLERANCE: f64 = 1e-9;

pub(crate) fn same_past(a: &[Point], b: &[Point]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(p, q)| {
            (p[0] - q[0]).abs() <= PAST_MATCH_TOLERANCE && (p[1] - q[1]).abs() <= PAST_MATCH_TOLERANCE
        })
}

/// Fraction of pool situations sharing `past` that continue into each mode.
pub fn ground_truth_mode_probs(pool: &[Situation], past: &[Point], n_modes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; n_modes];
    for s in pool.iter().filter(|s| same_past(&s.past, past)) {
        let m = s
            .mode_label
            .ok_or_else(|| Error::InvalidInput("pool situation without a mode label".into()))?;
        if m >= n_modes {
            return Err(Error::InvalidInput(format!("mode label {m} out of range")));
        }
        counts[m] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidInput("no pool situation shares this past".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}
