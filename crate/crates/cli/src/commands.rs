use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use trajflow::autodiff::Checkpoint;
use trajflow::data::{
    bundled_scene, generate, load_dataset, save_dataset, write_atomic, Dataset, Point, SceneKind, SceneSpec,
};
use trajflow::eval::{
    fit_mode_gaussians, kl_csv, kl_divergence, mle_csv, mode_likelihood_error, oracle_csv, oracle_errors,
    samples_to_jsonl, sampling_time_benchmark, timing_csv, GaussianMixture, MetricReport, Provenance,
};
use trajflow::predictor::TrajFlow;
use trajflow::rng::substream;
use trajflow::training::{train_pipeline, TrainConfig};
use trajflow::{Error, Result};

use crate::manifest::RunManifest;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const METRICS: &[&str] = &["kl", "mle", "oracle", "time"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

/// Reads a scene spec from a file, falling back to a bundled scene of that name.
pub fn load_spec(spec: &Path) -> Result<SceneSpec> {
    if spec.exists() {
        return SceneSpec::from_json(&read(spec)?);
    }
    let name = spec.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    bundled_scene(name).ok_or_else(|| Error::InvalidInput(format!("no spec file or bundled scene named {}", spec.display())))
}

pub fn gen_data(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<PathBuf> {
    let start = Instant::now();
    let mut spec = load_spec(spec_path)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let situations = generate(&spec)?;
    mkdir(out)?;
    let path = out.join(DATASET_FILE);
    save_dataset(
        &path,
        &Dataset {
            seed: spec.seed,
            spec: spec.clone(),
            situations,
        },
    )?;
    let mut m = RunManifest::new("gen-data", serde_json::to_value(&spec).expect("spec serializes"));
    m.seeds.insert("scene".into(), spec.seed);
    if spec_path.exists() {
        m.add_input(spec_path).map_err(io_err(spec_path))?;
    }
    m.outputs.push(path.clone());
    m.write(out, start.elapsed().as_secs_f64())?;
    Ok(path)
}

fn resolve_relative(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Loads a training config; relative paths are taken relative to the config file.
pub fn load_train_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::from_json(&read(path)?)?;
    cfg.dataset = resolve_relative(path, &cfg.dataset);
    cfg.out_dir = resolve_relative(path, &cfg.out_dir);
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if !cfg.dataset.is_file() {
        return Err(Error::Config {
            field: "dataset".into(),
            message: format!("{} does not exist", cfg.dataset.display()),
        });
    }
    Ok(cfg)
}

pub fn train(config: &Path, resume: bool, seed: Option<u64>) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    let cfg = load_train_config(config, seed)?;
    let mut m = RunManifest::new("train", serde_json::to_value(&cfg).expect("config serializes"));
    m.seeds.insert("train".into(), cfg.seed);
    m.add_input(config).map_err(io_err(config))?;
    m.add_input(&cfg.dataset).map_err(io_err(&cfg.dataset))?;
    let out = train_pipeline(&cfg, resume)?;
    m.outputs = vec![out.ae_checkpoint, out.flow_checkpoint, out.log_path];
    m.config["resume"] = json!(resume);
    let outputs = m.outputs.clone();
    m.write(&cfg.out_dir, start.elapsed().as_secs_f64())?;
    Ok(outputs)
}

pub fn init_config(dataset: &Path, out_dir: &Path, seed: u64, output: &Path) -> Result<()> {
    let cfg = TrainConfig::new(dataset.to_path_buf(), out_dir.to_path_buf(), seed);
    write_atomic(output, serde_json::to_string_pretty(&cfg).expect("config serializes").as_bytes())
}

pub struct EvalOptions {
    pub metrics: Vec<String>,
    pub n_samples: Option<usize>,
    pub kl_draws: usize,
    pub max_situations: usize,
    pub top_frac: f64,
    pub repeats: usize,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn check_horizon(model: &TrajFlow, data: &Dataset) -> Result<()> {
    let first = data
        .situations
        .first()
        .ok_or_else(|| Error::InvalidInput("dataset has no situations".into()))?;
    if first.future.len() != model.t_pred() || first.past.len() != model.t_past() {
        return Err(Error::InvalidInput(format!(
            "dataset horizon {}+{} does not match model horizon {}+{}",
            first.past.len(),
            first.future.len(),
            model.t_past(),
            model.t_pred()
        )));
    }
    Ok(())
}

/// Evenly spaced subset of at most `max` items, in order.
fn spread<T: Clone>(items: &[T], max: usize) -> Vec<T> {
    if items.len() <= max {
        return items.to_vec();
    }
    (0..max).map(|i| items[i * items.len() / max].clone()).collect()
}

pub fn evaluate(model_path: &Path, data_path: &Path, opts: &EvalOptions) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    if let Some(bad) = opts.metrics.iter().find(|m| !METRICS.contains(&m.as_str())) {
        return Err(Error::InvalidInput(format!("unknown metric `{bad}`; valid: {}", METRICS.join(", "))));
    }
    let (model, _) = TrajFlow::load(model_path)?;
    let ck = Checkpoint::load(model_path)?;
    let data = load_dataset(data_path)?;
    check_horizon(&model, &data)?;
    let seed = opts.seed.unwrap_or(ck.seed);
    let prov = Provenance {
        scene_id: data.spec.scene_id.clone(),
        seed,
        config_hash: ck.config_hash.clone(),
        flow_config: model.flow.config().clone(),
    };
    let out = opts
        .out
        .clone()
        .unwrap_or_else(|| model_path.parent().unwrap_or(Path::new(".")).join("eval"));
    mkdir(&out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, report: &MetricReport, csv: Vec<u8>| -> Result<()> {
        let json_path = out.join(format!("{name}.json"));
        let csv_path = out.join(format!("{name}.csv"));
        report.save(&json_path)?;
        write_atomic(&csv_path, &csv)?;
        written.push(json_path);
        written.push(csv_path);
        Ok(())
    };
    let situations = &data.situations;
    for metric in &opts.metrics {
        let mut rng = substream(seed, &format!("eval.{metric}"));
        match metric.as_str() {
            "kl" => {
                if data.spec.kind != SceneKind::Bimodal {
                    return Err(Error::InvalidInput("kl needs a bi-modal dataset with a shared past".into()));
                }
                let truth = GaussianMixture::equal(fit_mode_gaussians(situations, data.spec.n_modes())?)?;
                let n = opts.n_samples.unwrap_or(100);
                let draws = (0..opts.kl_draws)
                    .map(|_| kl_divergence(&model, situations, &truth, n, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                emit("kl", &MetricReport::kl(&prov, &draws)?, kl_csv(&draws)?)?;
            }
            "mle" => {
                let r = mode_likelihood_error(&model, situations, &data.spec, opts.n_samples.unwrap_or(100), &mut rng)?;
                emit("mle", &MetricReport::mle(&prov, &r)?, mle_csv(&[(prov.scene_id.clone(), r)])?)?;
            }
            "oracle" => {
                let subset = spread(situations, opts.max_situations);
                let fracs = [1.0, opts.top_frac];
                let r = oracle_errors(&model, &subset, opts.n_samples.unwrap_or(50), &fracs, &mut rng)?;
                emit("oracle", &MetricReport::oracle(&prov, &r)?, oracle_csv(&r)?)?;
            }
            "time" => {
                let r = sampling_time_benchmark(&model, &situations[0].past, opts.n_samples.unwrap_or(128), opts.repeats, &mut rng)?;
                emit("time", &MetricReport::timing(&prov, &r)?, timing_csv(&r)?)?;
            }
            _ => unreachable!("checked above"),
        }
    }
    let mut m = RunManifest::new(
        "evaluate",
        json!({
            "model": model_path,
            "data": data_path,
            "metrics": opts.metrics,
            "n_samples": opts.n_samples,
            "kl_draws": opts.kl_draws,
            "max_situations": opts.max_situations,
            "top_frac": opts.top_frac,
            "repeats": opts.repeats,
        }),
    );
    m.seeds.insert("eval".into(), seed);
    m.add_input(model_path).map_err(io_err(model_path))?;
    m.add_input(data_path).map_err(io_err(data_path))?;
    m.outputs = written.clone();
    m.write(&out, start.elapsed().as_secs_f64())?;
    Ok(written)
}

/// A past given either as a bare list of points or as `{"past": [...]}`.
pub fn parse_past(text: &str) -> Result<Vec<Point>> {
    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum PastFile {
        Points(Vec<Point>),
        Wrapped { past: Vec<Point> },
    }
    let parsed: PastFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    Ok(match parsed {
        PastFile::Points(p) | PastFile::Wrapped { past: p } => p,
    })
}

pub fn sample(model_path: &Path, past_path: &Path, n: usize, out: &Path, seed: Option<u64>) -> Result<usize> {
    let start = Instant::now();
    if n == 0 {
        return Err(Error::InvalidInput("-n must be at least 1".into()));
    }
    let (model, _) = TrajFlow::load(model_path)?;
    let ck = Checkpoint::load(model_path)?;
    let past = parse_past(&read(past_path)?)?;
    if past.len() != model.t_past() {
        return Err(Error::InvalidInput(format!(
            "past has {} points but the model expects {}",
            past.len(),
            model.t_past()
        )));
    }
    let seed = seed.unwrap_or(ck.seed);
    let mut preds = model.predict_trajectories(&past, n, &mut substream(seed, "sample"))?;
    preds.sort_by(|a, b| b.log_likelihood.total_cmp(&a.log_likelihood));
    write_atomic(out, samples_to_jsonl(&preds).as_bytes())?;
    let mut m = RunManifest::new("sample", json!({"model": model_path, "past": past_path, "n": n}));
    m.seeds.insert("sample".into(), seed);
    m.add_input(model_path).map_err(io_err(model_path))?;
    m.add_input(past_path).map_err(io_err(past_path))?;
    m.outputs.push(out.to_path_buf());
    m.write(out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")), start.elapsed().as_secs_f64())?;
    Ok(preds.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn past_formats() {
        assert_eq!(parse_past("[[0, 1], [2, 3.5]]").unwrap(), vec![[0.0, 1.0], [2.0, 3.5]]);
        assert_eq!(parse_past("{\"past\": [[1, 1]]}").unwrap(), vec![[1.0, 1.0]]);
        assert!(matches!(parse_past("[1, 2"), Err(Error::Parse { .. })));
    }

    #[test]
    fn spread_keeps_order_and_bound() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(spread(&v, 4), vec![0, 2, 5, 7]);
        assert_eq!(spread(&v, 20), v);
    }

    #[test]
    fn relative_paths_follow_config() {
        assert_eq!(resolve_relative(Path::new("/a/b/c.json"), Path::new("d")), PathBuf::from("/a/b/d"));
        assert_eq!(resolve_relative(Path::new("/a/b/c.json"), Path::new("/x")), PathBuf::from("/x"));
    }
}
