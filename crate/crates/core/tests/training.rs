//! Optimization loop: schedule logging, reproducibility, and divergence.

use skyclear::data::synthetic_pairs;
use skyclear::train::{read_loss_log, train, TrainOutput, DIVERGED_DUMP, FINAL_CHECKPOINT, LOSS_LOG};
use skyclear::{checkpoint, Config, Embedder, Error, Preset};

fn tiny(iterations: usize) -> Config {
    let mut cfg = Preset::Tiny.config();
    cfg.train.iterations = iterations;
    cfg.train.batch = 2;
    cfg
}

#[test]
fn logged_learning_rate_follows_the_cosine_closed_form() {
    let mut cfg = tiny(9);
    cfg.train.lr_init = 3e-4;
    cfg.train.lr_final = 2e-6;
    let data = synthetic_pairs(3, 32, 1).unwrap();
    let embedder = Embedder::from_config(&cfg.embedder).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    let (_, log) = train(&cfg, &data, &embedder, &TrainOutput { dir: Some(dir.path().to_path_buf()) }, |_| seen += 1).unwrap();
    assert_eq!(seen, 9);
    let written = read_loss_log(&dir.path().join(LOSS_LOG)).unwrap();
    assert_eq!(written.len(), 9);
    let total = 9.0f64;
    for (t, row) in written.iter().enumerate() {
        let expected = 2e-6 + (3e-4 - 2e-6) * (1.0 + (std::f64::consts::PI * t as f64 / (total - 1.0)).cos()) / 2.0;
        assert_eq!(row.step, t);
        assert!((row.lr - expected).abs() < 1e-9, "step {t}: {} vs {expected}", row.lr);
        assert!((row.loss - log[t].loss).abs() < 1e-6);
    }
    assert!((written[0].lr - 3e-4).abs() < 1e-12);
    assert!((written[8].lr - 2e-6).abs() < 1e-12);
}

#[test]
fn seeded_runs_write_identical_checkpoints() {
    let mut cfg = tiny(4);
    cfg.train.checkpoint_every = 2;
    let data = synthetic_pairs(4, 32, 2).unwrap();
    let embedder = Embedder::from_config(&cfg.embedder).unwrap();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &data, &embedder, &TrainOutput { dir: Some(dir.path().to_path_buf()) }, |_| {}).unwrap();
        assert!(dir.path().join("step_000002.ckpt").exists());
        (std::fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap(), std::fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let (model, meta) = checkpoint::from_bytes(&a).unwrap();
    assert_eq!(meta.step, 4);
    assert_eq!(model.config, cfg);

    let mut other = cfg.clone();
    other.train.seed = 99;
    let dir = tempfile::tempdir().unwrap();
    train(&other, &data, &embedder, &TrainOutput { dir: Some(dir.path().to_path_buf()) }, |_| {}).unwrap();
    assert_ne!(std::fs::read(dir.path().join(FINAL_CHECKPOINT)).unwrap(), a);
}

#[test]
fn loss_decreases_when_fitting_a_few_pairs() {
    let cfg = tiny(40);
    let data = synthetic_pairs(2, 32, 3).unwrap();
    let embedder = Embedder::from_config(&cfg.embedder).unwrap();
    let (_, log) = train(&cfg, &data, &embedder, &TrainOutput::default(), |_| {}).unwrap();
    let head: f64 = log[..5].iter().map(|s| s.loss).sum::<f64>() / 5.0;
    let tail: f64 = log[35..].iter().map(|s| s.loss).sum::<f64>() / 5.0;
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn non_finite_loss_aborts_with_a_state_dump() {
    let cfg = tiny(5);
    let mut data = synthetic_pairs(2, 32, 4).unwrap();
    for pair in &mut data {
        pair.hq.set(3, 3, 0, f32::NAN);
    }
    let embedder = Embedder::from_config(&cfg.embedder).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let Err(err) = train(&cfg, &data, &embedder, &TrainOutput { dir: Some(dir.path().to_path_buf()) }, |_| {}) else {
        panic!("training on a non-finite target must fail");
    };
    match err {
        Error::Diverged { step, dump: Some(dump), .. } => {
            assert_eq!(step, 0);
            assert_eq!(dump, dir.path().join(DIVERGED_DUMP));
            let (_, meta) = checkpoint::load(&dump).unwrap();
            assert_eq!(meta.step, 0);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(!dir.path().join(FINAL_CHECKPOINT).exists());
}

#[test]
fn empty_training_set_is_rejected() {
    let embedder = Embedder::toy(0, 32);
    assert!(matches!(train(&tiny(1), &[], &embedder, &TrainOutput::default(), |_| {}), Err(Error::EmptyDataset)));
}
