use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_trajflow"));
    c.env_remove("TRAJFLOW_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_branching_spec() -> Value {
    let mut spec: Value = serde_json::from_str(include_str!("../../core/scenes/branching_scene2.json")).unwrap();
    spec["scene_id"] = "tiny_branching".into();
    spec["n_samples"] = 24.into();
    spec["window_steps"] = 4.into();
    spec
}

fn write_json(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Generates the tiny dataset and trains a two-epoch model; returns (dataset, config, run dir).
fn tiny_run(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let spec = dir.join("spec.json");
    write_json(&spec, &small_branching_spec());
    let data_dir = dir.join("data");
    assert!(run(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", data_dir.to_str().unwrap()]).status.success());
    let dataset = data_dir.join("dataset.jsonl");
    let cfg_path = dir.join("train.json");
    let o = run(&[
        "init-config",
        "--dataset",
        "data/dataset.jsonl",
        "--out-dir",
        "run",
        "--seed",
        "5",
        "--output",
        cfg_path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    cfg["ae_phase"]["epochs"] = 3.into();
    cfg["flow_phase"]["epochs"] = 3.into();
    cfg["checkpoint_every"] = 1.into();
    write_json(&cfg_path, &cfg);
    let o = run(&["train", "--config", cfg_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    (dataset, cfg_path, dir.join("run"))
}

fn manifests(dir: &Path, command: &str) -> Vec<Value> {
    std::fs::read_dir(dir.join("manifests"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().starts_with(command))
        .map(|p| serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap())
        .collect()
}

#[test]
fn gen_data_bundled_scene_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = run(&["gen-data", "--spec", "bimodal_sigma015.json", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(out.join("dataset.jsonl")).unwrap();
    // header plus one line per situation
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 3001);
    assert!(run(&["gen-data", "--spec", "bimodal_sigma015.json", "--out", out.to_str().unwrap()]).status.success());
    assert_eq!(std::fs::read(out.join("dataset.jsonl")).unwrap(), first);
    let m = manifests(&out, "gen-data");
    assert_eq!(m.len(), 1, "identical runs share one content-addressed manifest");
    assert_eq!(m[0]["seeds"]["scene"], 103);
}

#[test]
fn seed_override_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = bin()
        .env("TRAJFLOW_SEED", "77")
        .args(["gen-data", "--spec", "branching_scene1", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let header = std::fs::read_to_string(out.join("dataset.jsonl")).unwrap();
    let header: Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(header["seed"], 77);

    let o = bin()
        .env("TRAJFLOW_SEED", "abc")
        .args(["gen-data", "--spec", "branching_scene1", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_proportions_exit_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_branching_spec();
    spec["mode_proportions"] = serde_json::json!([0.5, 0.5, 0.5]);
    let path = dir.path().join("bad.json");
    write_json(&path, &spec);
    let o = run(&["gen-data", "--spec", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mode_proportions"), "{}", stderr(&o));
}

#[test]
fn missing_dataset_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    assert!(run(&["init-config", "--dataset", "nope.jsonl", "--out-dir", "r", "--output", cfg.to_str().unwrap()])
        .status
        .success());
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset"));
}

#[test]
fn config_typo_reports_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    assert!(run(&["init-config", "--dataset", "x", "--out-dir", "r", "--output", cfg.to_str().unwrap()])
        .status
        .success());
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["flow_phase"]["batch_size"] = 0.into();
    write_json(&cfg, &v);
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("flow_phase.batch_size"), "{}", stderr(&o));
}

#[test]
fn train_evaluate_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, cfg, run_dir) = tiny_run(dir.path());
    let ae = run_dir.join("rnn_ae.ckpt.json");
    let flow = run_dir.join("flow.ckpt.json");
    let log = run_dir.join("training_log.csv");
    assert!(ae.is_file() && flow.is_file() && log.is_file());

    // config hash recorded in both checkpoints
    let hash = |p: &Path| {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash(&ae), hash(&flow));
    assert!(!hash(&ae).is_empty());
    assert_eq!(manifests(&run_dir, "train").len(), 1);

    // rerunning with --resume on a complete run leaves the log unchanged
    let before = std::fs::read(&log).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&log).unwrap(), before);

    // oracle on a branching scene gives a per-timestep table
    let eval_dir = dir.path().join("eval");
    let o = run(&[
        "evaluate",
        "--model",
        flow.to_str().unwrap(),
        "--data",
        dataset.to_str().unwrap(),
        "--metrics",
        "oracle,mle",
        "--max-situations",
        "10",
        "--n-samples",
        "20",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(eval_dir.join("oracle.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,top_1,top_0.1");
    assert_eq!(lines.count(), 22);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("mle.json")).unwrap()).unwrap();
    assert_eq!(report["metric"], "mle");
    assert_eq!(report["provenance"]["config_hash"].as_str().unwrap(), hash(&flow));
    let table = std::fs::read_to_string(eval_dir.join("mle.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "scene,mode,estimator,min,avg,max");
    assert_eq!(table.lines().count(), 1 + 2 * 3);
    assert_eq!(manifests(&eval_dir, "evaluate").len(), 1);

    // unknown metric lists the valid names
    let o = run(&["evaluate", "--model", flow.to_str().unwrap(), "--data", dataset.to_str().unwrap(), "--metrics", "ade"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kl, mle, oracle, time"));

    // KL is only defined for the bi-modal scenes
    let o = run(&["evaluate", "--model", flow.to_str().unwrap(), "--data", dataset.to_str().unwrap(), "--metrics", "kl"]);
    assert_eq!(o.status.code(), Some(2));

    // incompatible horizon
    let bimodal = dir.path().join("bimodal");
    assert!(run(&["gen-data", "--spec", "bimodal_sigma005", "--out", bimodal.to_str().unwrap()]).status.success());
    let o = run(&[
        "evaluate",
        "--model",
        flow.to_str().unwrap(),
        "--data",
        bimodal.join("dataset.jsonl").to_str().unwrap(),
        "--metrics",
        "oracle",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("horizon"));

    // sampling
    let past = dir.path().join("past.json");
    std::fs::write(&past, serde_json::to_string(&(0..8).map(|i| [i as f64 + 2.0, 0.0]).collect::<Vec<_>>()).unwrap()).unwrap();
    let out = dir.path().join("samples.jsonl");
    let o = run(&["sample", "--model", flow.to_str().unwrap(), "--past", past.to_str().unwrap(), "-n", "12", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs: Vec<Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), 12);
    let lls: Vec<f64> = recs.iter().map(|r| r["log_likelihood"].as_f64().unwrap()).collect();
    assert!(lls.windows(2).all(|w| w[0] >= w[1]));
    assert!(recs.iter().all(|r| r["points"].as_array().unwrap().len() == 22));

    let o = run(&["sample", "--model", flow.to_str().unwrap(), "--past", past.to_str().unwrap(), "-n", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1);

    std::fs::write(&past, "[[0, 0], [1, 0]]").unwrap();
    let o = run(&["sample", "--model", flow.to_str().unwrap(), "--past", past.to_str().unwrap(), "-n", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn set_epochs(cfg_path: &Path, out_dir: &str, epochs: usize) {
    let mut cfg: Value = serde_json::from_str(&std::fs::read_to_string(cfg_path).unwrap()).unwrap();
    cfg["out_dir"] = out_dir.into();
    cfg["ae_phase"]["epochs"] = epochs.into();
    cfg["flow_phase"]["epochs"] = epochs.into();
    cfg["ae_phase"]["patience"] = 0.into();
    cfg["flow_phase"]["patience"] = 0.into();
    write_json(cfg_path, &cfg);
}

#[test]
fn resume_after_interruption_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg_path, _) = tiny_run(dir.path());
    set_epochs(&cfg_path, "full", 60);
    assert!(run(&["train", "--config", cfg_path.to_str().unwrap()]).status.success());
    let full = std::fs::read_to_string(dir.path().join("full/training_log.csv")).unwrap();

    set_epochs(&cfg_path, "cut", 60);
    let mut child = bin().args(["train", "--config", cfg_path.to_str().unwrap()]).spawn().unwrap();
    let ae_ck = dir.path().join("cut/rnn_ae.ckpt.json");
    while !ae_ck.exists() && child.try_wait().unwrap().is_none() {
        std::thread::sleep(std::time::Duration::from_millis(5));
    }
    child.kill().ok();
    child.wait().unwrap();
    let o = run(&["train", "--config", cfg_path.to_str().unwrap(), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resumed = std::fs::read_to_string(dir.path().join("cut/training_log.csv")).unwrap();
    assert_eq!(strip_times(&resumed), strip_times(&full));

    // a changed config refuses to continue from these checkpoints
    set_epochs(&cfg_path, "cut", 61);
    let o = run(&["train", "--config", cfg_path.to_str().unwrap(), "--resume"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn strip_times(log: &str) -> Vec<String> {
    log.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

#[test]
fn identical_runs_log_identical_losses() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, _, ra) = tiny_run(a.path());
    let (_, _, rb) = tiny_run(b.path());
    let la = std::fs::read_to_string(ra.join("training_log.csv")).unwrap();
    let lb = std::fs::read_to_string(rb.join("training_log.csv")).unwrap();
    assert_eq!(strip_times(&la), strip_times(&lb));
    let params_hash = |p: PathBuf| {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        v["params_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(params_hash(ra.join("flow.ckpt.json")), params_hash(rb.join("flow.ckpt.json")));
    assert_eq!(params_hash(ra.join("rnn_ae.ckpt.json")), params_hash(rb.join("rnn_ae.ckpt.json")));
}
