use cmst_core::datagen::{generate_synthetic, MultimodalDataset, SyntheticConfig};
use cmst_core::training::{
    ablation_arms, read_metrics, run_arms, run_experiment, AblationAxis, ExperimentConfig, RunOptions, Trainer,
    CHECKPOINT_FILE, METRICS_FILE, REPORT_FILE,
};
use cmst_core::CmstError;

fn data() -> MultimodalDataset {
    generate_synthetic(&SyntheticConfig {
        n_classes: 3,
        n_pairs: 120,
        d_v: 12,
        d_t: 8,
        latent_dim: 4,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.generator_hidden = vec![16];
    cfg.model.common_dim = 8;
    cfg.siamese.hidden = vec![16];
    cfg.siamese.embed_dim = 4;
    cfg.strategy.siamese_pretrain_epochs = 2;
    cfg.epochs = 4;
    cfg.batch_size = 24;
    cfg.eval.ks = vec![1, 5];
    cfg.eval.snapshot_every = 2;
    cfg
}

#[test]
fn resume_matches_straight_run() {
    let d = data();
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&cfg, &d, &a, &RunOptions::default()).unwrap();
    let first = run_experiment(&cfg, &d, &b, &RunOptions { resume: None, stop_after: Some(2) }).unwrap();
    assert!(first.report.is_none());
    let resume = RunOptions { resume: Some(b.join(CHECKPOINT_FILE)), stop_after: None };
    run_experiment(&cfg, &d, &b, &resume).unwrap();
    for f in [METRICS_FILE, REPORT_FILE, CHECKPOINT_FILE] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn periodic_checkpoints_resume_exactly() {
    let d = data();
    let mut cfg = config();
    cfg.checkpoint_every = 1;
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    run_experiment(&cfg, &d, &a, &RunOptions::default()).unwrap();
    let mut t = Trainer::new(&cfg, &d).unwrap();
    t.load_checkpoint(&a.join("checkpoint_epoch_003.bin")).unwrap();
    assert_eq!(t.epoch(), 3);
    t.run_until(cfg.epochs, &mut |_| Ok(())).unwrap();
    assert_eq!(t.checkpoint().encode(), std::fs::read(a.join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn checkpoint_from_other_config_is_refused() {
    let d = data();
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, &d, dir.path(), &RunOptions { resume: None, stop_after: Some(1) }).unwrap();
    let mut other = cfg.clone();
    other.transfer.c_self = 0.5;
    let mut t = Trainer::new(&other, &d).unwrap();
    let before = t.models.clone();
    let err = t.load_checkpoint(&dir.path().join(CHECKPOINT_FILE)).unwrap_err();
    assert!(matches!(err, CmstError::CheckpointMismatch(_)), "{err}");
    assert_eq!(t.models, before);
}

#[test]
fn divergence_keeps_partial_log() {
    let d = data();
    let mut cfg = config();
    cfg.strategy.siamese_pretrain_epochs = 0;
    cfg.divergence_threshold = 1e-6;
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&cfg, &d, dir.path(), &RunOptions::default()).unwrap_err();
    assert!(matches!(err, CmstError::Divergence { .. }), "{err}");
    assert!(dir.path().join(METRICS_FILE).exists());
}

#[test]
fn ablation_axes_have_expected_arms() {
    let cfg = config();
    let names = |axis| ablation_arms(&cfg, axis).into_iter().map(|(n, _)| n).collect::<Vec<_>>();
    assert_eq!(names(AblationAxis::Transfer), ["value", "difference", "product", "none"]);
    assert_eq!(names(AblationAxis::Source), ["cosine", "euclidean", "siamese"]);
    assert_eq!(names(AblationAxis::Strategy).len(), 3);
}

#[test]
fn failed_arm_is_marked_and_others_kept() {
    let d = data();
    let good = config();
    let mut bad = config();
    bad.divergence_threshold = 1e-6;
    let arms = vec![("good".to_string(), good), ("bad".to_string(), bad)];
    let out = run_arms(&arms, &d, &[0, 1], 2);
    assert_eq!(out[0].arm, "good");
    assert!(out[0].error.is_none() && out[0].mean_map().is_some());
    assert_eq!(out[0].runs.len(), 2);
    assert!(out[1].error.is_some() && out[1].mean_map().is_none());
}

#[test]
fn ablation_is_independent_of_worker_count() {
    let d = data();
    let arms = ablation_arms(&config(), AblationAxis::Transfer);
    let one = run_arms(&arms, &d, &[3], 1);
    let many = run_arms(&arms, &d, &[3], 3);
    let maps = |s: &[cmst_core::training::ArmSummary]| s.iter().map(|a| a.mean_map()).collect::<Vec<_>>();
    assert_eq!(maps(&one), maps(&many));
}

#[test]
fn metrics_log_covers_both_phases() {
    let d = data();
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, &d, dir.path(), &RunOptions::default()).unwrap();
    let recs = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(recs.len(), 2 + 4);
    assert!(recs[2..].iter().all(|r| r.l_g.is_some() && r.l_d.is_some()));
    assert_eq!(recs.iter().filter(|r| r.eval.is_some()).count(), 2);
}
