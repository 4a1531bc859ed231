use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Point, Situation};
use crate::error::{Error, Result};
use crate::predictor::TrajFlow;
use crate::rng::Rng;

/// Number of samples kept for a fraction: `ceil(frac * n)`, at least 1.
pub fn top_count(n: usize, top_frac: f64) -> usize {
    (((top_frac * n as f64) - 1e-9).ceil().max(1.0) as usize).min(n)
}

fn step_errors(sample: &[Point], truth: &[Point]) -> Vec<f64> {
    sample
        .iter()
        .zip(truth)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .collect()
}

/// Per-step errors averaged over the `top_frac` samples with the lowest mean error.
pub fn oracle_from_samples(samples: &[Vec<Point>], truth: &[Point], top_frac: f64) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    if !(top_frac > 0.0 && top_frac <= 1.0) {
        return Err(Error::InvalidInput(format!("top_frac {top_frac} outside (0, 1]")));
    }
    if samples.iter().any(|s| s.len() != truth.len()) {
        return Err(Error::Shape("sample and ground-truth lengths differ".into()));
    }
    let mut errs: Vec<(f64, Vec<f64>)> = samples
        .iter()
        .map(|s| {
            let e = step_errors(s, truth);
            (e.iter().sum::<f64>() / e.len() as f64, e)
        })
        .collect();
    errs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let k = top_count(samples.len(), top_frac);
    let mut per_step = vec![0.0; truth.len()];
    for (_, e) in &errs[..k] {
        for (acc, v) in per_step.iter_mut().zip(e) {
            *acc += v / k as f64;
        }
    }
    Ok(per_step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub top_frac: f64,
    pub top_k: usize,
    pub n_samples: usize,
    pub n_situations: usize,
    /// Mean over situations of the per-timestep error.
    pub per_step: Vec<f64>,
    /// Mean of `per_step` over the horizon.
    pub mean: f64,
}

/// Oracle errors for several fractions, sharing one sample set per situation.
pub fn oracle_errors(
    model: &TrajFlow,
    situations: &[Situation],
    n_samples: usize,
    fracs: &[f64],
    rng: &mut Rng,
) -> Result<Vec<OracleResult>> {
    if situations.is_empty() || n_samples == 0 {
        return Err(Error::InvalidInput("need situations and a positive sample count".into()));
    }
    let t = model.t_pred();
    let mut sums = vec![vec![0.0; t]; fracs.len()];
    for s in situations {
        if s.future.len() != t {
            return Err(Error::Shape(format!("future length {} but model horizon {t}", s.future.len())));
        }
        let samples: Vec<Vec<Point>> = model
            .predict_trajectories(&s.past, n_samples, rng)?
            .into_iter()
            .map(|p| p.points)
            .collect();
        for (acc, &f) in sums.iter_mut().zip(fracs) {
            for (a, v) in acc.iter_mut().zip(oracle_from_samples(&samples, &s.future, f)?) {
                *a += v;
            }
        }
    }
    let n = situations.len() as f64;
    Ok(fracs
        .iter()
        .zip(sums)
        .map(|(&f, acc)| {
            let per_step: Vec<f64> = acc.into_iter().map(|v| v / n).collect();
            OracleResult {
                top_frac: f,
                top_k: top_count(n_samples, f),
                n_samples,
                n_situations: situations.len(),
                mean: per_step.iter().sum::<f64>() / per_step.len() as f64,
                per_step,
            }
        })
        .collect())
}

pub fn oracle_error(
    model: &TrajFlow,
    situations: &[Situation],
    n_samples: usize,
    top_frac: f64,
    rng: &mut Rng,
) -> Result<OracleResult> {
    Ok(oracle_errors(model, situations, n_samples, &[top_frac], rng)?.remove(0))
}

/// Distance between the mean final positions of each pair of modes, averaged over pairs.
pub fn mean_inter_mode_endpoint_distance(situations: &[Situation], n_modes: usize) -> Result<f64> {
    let mut sums = vec![([0.0, 0.0], 0usize); n_modes];
    for s in situations {
        let m = s
            .mode_label
            .filter(|&m| m < n_modes)
            .ok_or_else(|| Error::InvalidInput("missing or out-of-range mode label".into()))?;
        let end = *s.future.last().ok_or_else(|| Error::InvalidInput("empty future".into()))?;
        sums[m].0[0] += end[0];
        sums[m].0[1] += end[1];
        sums[m].1 += 1;
    }
    let means: Vec<Point> = sums
        .iter()
        .filter(|(_, c)| *c > 0)
        .map(|(p, c)| [p[0] / *c as f64, p[1] / *c as f64])
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            total += ((means[i][0] - means[j][0]).powi(2) + (means[i][1] - means[j][1]).powi(2)).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::InvalidInput("need at least two populated modes".into()));
    }
    Ok(total / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingResult {
    pub n: usize,
    pub repeats: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub times_ms: Vec<f64>,
    pub hardware: String,
}

/// CPU model, core count and target, best effort.
pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{cpu}; {cores} core(s); {}-{}", std::env::consts::ARCH, std::env::consts::OS)
}

/// Wall-clock time of `predict_trajectories(past, n)` after one warm-up call.
pub fn sampling_time_benchmark(
    model: &TrajFlow,
    past: &[Point],
    n: usize,
    repeats: usize,
    rng: &mut Rng,
) -> Result<TimingResult> {
    if repeats == 0 || n == 0 {
        return Err(Error::InvalidInput("repeats and n must be positive".into()));
    }
    model.predict_trajectories(past, n, rng)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let preds = model.predict_trajectories(past, n, rng)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(preds);
    }
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let pct = |q: f64| sorted[((q * (repeats - 1) as f64).round() as usize).min(repeats - 1)];
    let median = if repeats % 2 == 1 {
        sorted[repeats / 2]
    } else {
        0.5 * (sorted[repeats / 2 - 1] + sorted[repeats / 2])
    };
    Ok(TimingResult {
        n,
        repeats,
        median_ms: median,
        mean_ms: times.iter().sum::<f64>() / repeats as f64,
        p95_ms: pct(0.95),
        times_ms: times,
        hardware: hardware_description(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(offset: f64, n: usize) -> Vec<Point> {
        (0..n).map(|i| [i as f64, offset]).collect()
    }

    #[test]
    fn perfect_samples_give_zero() {
        let truth = line(0.0, 5);
        let e = oracle_from_samples(&vec![truth.clone(); 4], &truth, 0.1).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ranking_arithmetic() {
        let truth = line(0.0, 3);
        // sample i has constant error i + 1
        let samples: Vec<Vec<Point>> = (0..10).rev().map(|i| line((i + 1) as f64, 3)).collect();
        assert_eq!(oracle_from_samples(&samples, &truth, 0.1).unwrap(), vec![1.0; 3]);
        assert_eq!(oracle_from_samples(&samples, &truth, 1.0).unwrap(), vec![5.5; 3]);
        assert_eq!(oracle_from_samples(&samples, &truth, 0.3).unwrap(), vec![2.0; 3]);
    }

    #[test]
    fn count_rounds_up() {
        assert_eq!(top_count(50, 0.1), 5);
        assert_eq!(top_count(3, 0.1), 1);
        assert_eq!(top_count(1, 0.01), 1);
        assert_eq!(top_count(10, 0.25), 3);
        assert_eq!(top_count(10, 1.0), 10);
    }

    #[test]
    fn monotone_in_fraction() {
        let truth = line(0.0, 4);
        let samples: Vec<Vec<Point>> = (0..50)
            .map(|i| (0..4).map(|t| [t as f64 + ((i * 7 + t) % 5) as f64 * 0.1, (i as f64 * 0.37).sin()]).collect())
            .collect();
        let mean = |f| {
            let e = oracle_from_samples(&samples, &truth, f).unwrap();
            e.iter().sum::<f64>() / e.len() as f64
        };
        let fracs = [1.0, 0.5, 0.3, 0.1, 0.02];
        for w in fracs.windows(2) {
            assert!(mean(w[0]) >= mean(w[1]));
        }
    }

    #[test]
    fn bad_inputs() {
        let truth = line(0.0, 2);
        assert!(oracle_from_samples(&[], &truth, 0.1).is_err());
        assert!(oracle_from_samples(&[truth.clone()], &truth, 0.0).is_err());
        assert!(matches!(oracle_from_samples(&[line(0.0, 3)], &truth, 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn endpoint_distance_of_two_modes() {
        let mk = |m, end: Point| Situation {
            scene_id: "s".into(),
            agent_id: 0,
            mode_label: Some(m),
            past: vec![[0.0, 0.0]],
            future: vec![[0.0, 0.0], end],
            dt: 0.1,
            step: None,
        };
        let data = vec![mk(0, [3.0, 1.0]), mk(0, [3.0, 3.0]), mk(1, [0.0, -2.0])];
        assert!((mean_inter_mode_endpoint_distance(&data, 2).unwrap() - 5.0).abs() < 1e-12);
    }
}
