use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::predictor::Prediction;

use super::kl::KlResult;
use super::modes::MleResult;
use super::oracle::{OracleResult, TimingResult};

/// Where a metric came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub flow_config: FlowConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub provenance: Provenance,
    pub sample_count: usize,
    /// Headline numbers.
    pub values: BTreeMap<String, f64>,
    /// Per-mode, per-window or per-timestep detail.
    pub breakdown: serde_json::Value,
    #[serde(default)]
    pub flags: Vec<String>,
}

fn all_finite(v: &serde_json::Value) -> bool {
    match v {
        serde_json::Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
        serde_json::Value::Array(a) => a.iter().all(all_finite),
        serde_json::Value::Object(o) => o.values().all(all_finite),
        _ => true,
    }
}

impl MetricReport {
    fn build(metric: &str, provenance: &Provenance, sample_count: usize, values: BTreeMap<String, f64>, breakdown: impl Serialize) -> Result<Self> {
        let report = Self {
            metric: metric.into(),
            provenance: provenance.clone(),
            sample_count,
            values,
            breakdown: serde_json::to_value(breakdown).map_err(|e| Error::Numerical(format!("non-finite metric value: {e}")))?,
            flags: Vec::new(),
        };
        Ok(report)
    }

    /// KL over several independent draws; headline is the median of `kl_on_samples`.
    pub fn kl(provenance: &Provenance, draws: &[KlResult]) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::InvalidInput("no KL draws".into()));
        }
        let med = |f: fn(&KlResult) -> f64| median(&draws.iter().map(f).collect::<Vec<_>>());
        let values = BTreeMap::from([
            ("kl_on_samples_median".to_string(), med(|d| d.kl_on_samples)),
            ("kl_on_training_median".to_string(), med(|d| d.kl_on_training)),
        ]);
        let mut r = Self::build("kl", provenance, draws[0].n_samples, values, draws)?;
        if draws.iter().any(|d| d.clamped) {
            r.flags.push("q_clamped".into());
        }
        r.validate()?;
        Ok(r)
    }

    pub fn mle(provenance: &Provenance, result: &MleResult) -> Result<Self> {
        let mut values = BTreeMap::new();
        for s in &result.likelihood {
            values.insert(format!("{}_avg", s.mode), s.avg);
            values.insert(format!("{}_max", s.mode), s.max);
        }
        let r = Self::build("mle", provenance, result.n_samples, values, result)?;
        r.validate()?;
        Ok(r)
    }

    pub fn oracle(provenance: &Provenance, results: &[OracleResult]) -> Result<Self> {
        let first = results.first().ok_or_else(|| Error::InvalidInput("no oracle results".into()))?;
        let values = results.iter().map(|o| (format!("top_{}", o.top_frac), o.mean)).collect();
        let r = Self::build("oracle", provenance, first.n_samples, values, results)?;
        r.validate()?;
        Ok(r)
    }

    pub fn timing(provenance: &Provenance, result: &TimingResult) -> Result<Self> {
        let values = BTreeMap::from([
            ("median_ms".to_string(), result.median_ms),
            ("mean_ms".to_string(), result.mean_ms),
            ("p95_ms".to_string(), result.p95_ms),
        ]);
        let r = Self::build("time", provenance, result.n, values, result)?;
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.metric.is_empty() || self.provenance.scene_id.is_empty() || self.provenance.config_hash.is_empty() {
            return Err(Error::InvalidInput("report provenance fields must be nonempty".into()));
        }
        if !self.values.values().all(|v| v.is_finite()) || !all_finite(&self.breakdown) {
            return Err(Error::Numerical(format!("{} report holds a non-finite value", self.metric)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(&r).map_err(wrap)?;
    }
    w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))
}

/// Min/avg/max per mode per scene, one row per estimator.
pub fn mle_csv(results: &[(String, MleResult)]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for (scene, r) in results {
        for (estimator, stats) in [("likelihood", &r.likelihood), ("empirical", &r.empirical)] {
            for s in stats {
                rows.push(vec![
                    scene.clone(),
                    s.mode.clone(),
                    estimator.to_string(),
                    format!("{:.6}", s.min),
                    format!("{:.6}", s.avg),
                    format!("{:.6}", s.max),
                ]);
            }
        }
    }
    csv_bytes(&["scene", "mode", "estimator", "min", "avg", "max"], rows)
}

/// One row per timestep, one column per fraction.
pub fn oracle_csv(results: &[OracleResult]) -> Result<Vec<u8>> {
    let header: Vec<String> = std::iter::once("step".to_string())
        .chain(results.iter().map(|r| format!("top_{}", r.top_frac)))
        .collect();
    let steps = results.first().map_or(0, |r| r.per_step.len());
    let rows = (0..steps)
        .map(|t| {
            std::iter::once((t + 1).to_string())
                .chain(results.iter().map(|r| format!("{:.6}", r.per_step[t])))
                .collect()
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(&header, rows)
}

pub fn kl_csv(draws: &[KlResult]) -> Result<Vec<u8>> {
    let rows = draws
        .iter()
        .enumerate()
        .map(|(i, d)| {
            vec![
                i.to_string(),
                format!("{:.6}", d.kl_on_samples),
                format!("{:.6}", d.kl_on_training),
                d.clamped.to_string(),
            ]
        })
        .collect();
    csv_bytes(&["draw", "kl_on_samples", "kl_on_training", "clamped"], rows)
}

pub fn timing_csv(result: &TimingResult) -> Result<Vec<u8>> {
    let rows = result
        .times_ms
        .iter()
        .enumerate()
        .map(|(i, t)| vec![i.to_string(), format!("{t:.4}")])
        .collect();
    csv_bytes(&["repeat", "ms"], rows)
}

/// Line-delimited JSON, one `{points, log_likelihood}` record per line.
pub fn samples_to_jsonl(preds: &[Prediction]) -> String {
    preds
        .iter()
        .map(|p| serde_json::to_string(p).expect("prediction serializes") + "\n")
        .collect()
}

pub fn samples_from_jsonl(text: &str) -> Result<Vec<Prediction>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}
