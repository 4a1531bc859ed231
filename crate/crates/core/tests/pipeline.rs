use std::path::Path;

use trajflow::autodiff::Checkpoint;
use trajflow::autoencoder::encode_situations;
use trajflow::data::{bundled_scene, generate, save_dataset, Dataset, Point};
use trajflow::predictor::TrajFlow;
use trajflow::rng::substream;
use trajflow::training::{nll_loss, read_training_log, train_pipeline, TrainConfig, AE_CHECKPOINT_FILE, FLOW_CHECKPOINT_FILE};

fn small_bimodal(dir: &Path) -> (Dataset, std::path::PathBuf) {
    let mut spec = bundled_scene("bimodal_sigma010").unwrap();
    spec.n_samples = 300;
    let situations = generate(&spec).unwrap();
    let data = Dataset {
        seed: spec.seed,
        spec,
        situations,
    };
    let path = dir.join("data.jsonl");
    save_dataset(&path, &data).unwrap();
    (data, path)
}

fn config(dataset: &Path, out: &Path, flow_epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(dataset.to_path_buf(), out.to_path_buf(), 21);
    cfg.ae_phase.epochs = 20;
    cfg.flow_phase.epochs = flow_epochs;
    cfg.flow_phase.patience = 0;
    cfg
}

#[test]
fn two_phase_training_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, path) = small_bimodal(dir.path());
    let out = train_pipeline(&config(&path, &dir.path().join("a"), 50), false).unwrap();

    // the frozen AE is what was checkpointed after phase 1, and what the flow references
    let ae_ck = Checkpoint::load(&out.ae_checkpoint).unwrap();
    let flow_ck = Checkpoint::load(&out.flow_checkpoint).unwrap();
    assert_eq!(ae_ck.params_hash, out.model.ae.hash());
    assert_eq!(flow_ck.metadata["ae_hash"].as_str().unwrap(), out.model.ae.hash());
    assert_eq!(ae_ck.config_hash, flow_ck.config_hash);

    // a run whose flow phase barely trains ends with the same AE
    let short = train_pipeline(&config(&path, &dir.path().join("b"), 1), false).unwrap();
    assert_eq!(short.model.ae.hash(), out.model.ae.hash());

    // logged flow loss equals an independent recomputation from the checkpoints
    let log = read_training_log(&out.log_path).unwrap();
    let flow_losses: Vec<f64> = log.iter().filter(|r| r.phase == "flow").map(|r| r.loss).collect();
    assert_eq!(flow_losses.len(), 50);
    let (model, _) = TrajFlow::load(&dir.path().join("a").join(FLOW_CHECKPOINT_FILE)).unwrap();
    let enc = encode_situations(&model.ae, &data.situations).unwrap();
    let pasts: Vec<&[Point]> = data.situations.iter().map(|s| s.past.as_slice()).collect();
    let recomputed = nll_loss(&model.flow, &enc, &pasts).unwrap();
    assert!((recomputed - flow_losses[49]).abs() < 1e-9, "{recomputed} vs {}", flow_losses[49]);

    // loss decreases over the first 50 epochs
    assert!(flow_losses[49] < flow_losses[0] - 1.0, "{flow_losses:?}");
    let ae_losses: Vec<f64> = log.iter().filter(|r| r.phase == "rnn_ae").map(|r| r.loss).collect();
    assert!(ae_losses[19] < ae_losses[0], "{ae_losses:?}");

    // reloaded model samples exactly like the in-memory one
    let past = &data.situations[0].past;
    let a = out.model.predict_trajectories(past, 8, &mut substream(1, "s")).unwrap();
    let b = model.predict_trajectories(past, 8, &mut substream(1, "s")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_of_complete_run_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = small_bimodal(dir.path());
    let cfg = config(&path, &dir.path().join("a"), 3);
    let first = train_pipeline(&cfg, false).unwrap();
    let before = std::fs::read(dir.path().join("a").join(AE_CHECKPOINT_FILE)).unwrap();
    let again = train_pipeline(&cfg, true).unwrap();
    assert_eq!(again.history, first.history);
    assert_eq!(again.model.ae.hash(), first.model.ae.hash());
    assert_eq!(again.model.flow.params().content_hash(), first.model.flow.params().content_hash());
    assert_eq!(again.model.flow.latent_norm(), first.model.flow.latent_norm());
    assert_eq!(std::fs::read(dir.path().join("a").join(AE_CHECKPOINT_FILE)).unwrap(), before);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&dir.path().join("absent.jsonl"), dir.path(), 1);
    assert!(matches!(train_pipeline(&cfg, false), Err(trajflow::Error::Io { .. })));
}
