//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr,
//! bypassing output capture, then asserts.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cmst_core::common_space::{
    discriminator_objective, generator_objective, softmax_cross_entropy, transfer_loss_difference,
    transfer_loss_product, transfer_loss_value, LossWeights, ObjectiveParts, TransferTerms,
};
use cmst_core::datagen::{generate_synthetic, MultimodalDataset, SyntheticConfig};
use cmst_core::eval::{evaluate_embeddings, map_score, topk_pair_accuracy};
use cmst_core::gradsuite::{run_gradsuite, GradSuiteConfig};
use cmst_core::nn::{Matrix, Rng};
use cmst_core::similarity::contrastive_term;
use cmst_core::training::{
    run_ablation, run_arms, AblationAxis, ArmSummary, ExperimentConfig, Phase, SimilaritySource, StrategyKind,
    Trainer,
};

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n:>2} [{}] {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let report = run_gradsuite(&GradSuiteConfig::default()).expect("suite runs");
    let elapsed = start.elapsed();
    let enough = report.losses.iter().all(|l| l.configs >= 20);
    let worst = report.losses.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    let pass = report.passed() && enough && report.losses.len() == 7 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "gradient suite",
        pass,
        &format!(
            "{} losses, worst relative error {worst:.2e}, failures {:?}, {:.1}s",
            report.losses.len(),
            report.failures(),
            elapsed.as_secs_f64()
        ),
    );
}

fn random_points(rng: &mut Rng, n: usize, d: usize, integer: bool) -> Matrix<f64> {
    let data = (0..n * d)
        .map(|_| if integer { rng.below(3) as f64 } else { rng.normal() })
        .collect();
    Matrix::from_vec(n, d, data).unwrap()
}

/// Rank of every gallery item for one query, by pairwise comparison.
fn oracle_ranks(query: &[f64], gallery: &Matrix<f64>) -> Vec<usize> {
    let dist: Vec<f64> = gallery
        .iter_rows()
        .map(|g| query.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    (0..dist.len())
        .map(|g| {
            1 + (0..dist.len())
                .filter(|&h| dist[h] < dist[g] || (dist[h] == dist[g] && h < g))
                .count()
        })
        .collect()
}

fn oracle_map(q: &Matrix<f64>, g: &Matrix<f64>, ql: &[usize], gl: &[usize], trunc: Option<usize>) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for (i, row) in q.iter_rows().enumerate() {
        let ranks = oracle_ranks(row, g);
        let rel: Vec<usize> = (0..gl.len()).filter(|&h| gl[h] == ql[i]).collect();
        if rel.is_empty() {
            continue;
        }
        let limit = trunc.unwrap_or(gl.len());
        let mut ap = 0.0;
        for &h in &rel {
            let r = ranks[h];
            if r <= limit {
                let hits = rel.iter().filter(|&&x| ranks[x] <= r).count();
                ap += hits as f64 / r as f64;
            }
        }
        total += ap / rel.len().min(limit) as f64;
        counted += 1;
    }
    total / counted as f64
}

fn oracle_topk(q: &Matrix<f64>, g: &Matrix<f64>, pairs: &[usize], k: usize) -> f64 {
    let hits = q
        .iter_rows()
        .enumerate()
        .filter(|(i, row)| oracle_ranks(row, g)[pairs[*i]] <= k)
        .count();
    hits as f64 / q.rows() as f64
}

#[test]
fn criterion_02_metric_oracles() {
    let start = Instant::now();
    let mut rng = Rng::stream(2, "acceptance/oracles");
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let n = 2 + rng.below(19);
        let d = 1 + rng.below(4);
        let c = 1 + rng.below(4);
        let integer = trial % 2 == 0;
        let q = random_points(&mut rng, n, d, integer);
        let g = random_points(&mut rng, n, d, integer);
        let ql: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let mut gl: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        gl[0] = ql[0];
        let trunc = if rng.below(2) == 0 { None } else { Some(1 + rng.below(n)) };
        let got = map_score(&q, &g, &ql, &gl, trunc).unwrap();
        worst = worst.max((got - oracle_map(&q, &g, &ql, &gl, trunc)).abs());
        let mut pairs: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut pairs);
        let k = 1 + rng.below(n);
        let got = topk_pair_accuracy(&q, &g, &pairs, k).unwrap();
        worst = worst.max((got - oracle_topk(&q, &g, &pairs, k)).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "metric oracles",
        worst <= 1e-12 && elapsed < Duration::from_secs(10),
        &format!("100 instances, max deviation {worst:.1e}, {:.2}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_03_closed_form_values() {
    let t = |intra, paired, cross| TransferTerms { intra, paired, cross };
    let uniform = softmax_cross_entropy(&Matrix::<f64>::zeros(2, 4), &[0, 3]).unwrap().0;
    let parts = ObjectiveParts { label: 0.5, sim: 0.3, l_v: 0.7, l_t: 0.2 };
    let checks = [
        ("contrastive matched at zero", contrastive_term(0.0, true, 1.0), 0.0),
        ("contrastive saturated hinge", contrastive_term(1.5, false, 1.0), 0.0),
        ("contrastive active hinge", contrastive_term(0.25, false, 1.0), 0.75),
        ("value transfer", transfer_loss_value(&[t(0.3, 0.8, 0.5)], 1.0), 0.4),
        ("difference transfer", transfer_loss_difference(&[t(0.4, 0.2, 0.1)], 1.0), 0.5),
        ("product transfer", transfer_loss_product(&[t(2.0, 3.0, 5.0)], None), 1.0),
        ("uniform cross-entropy", uniform, 4f64.ln()),
        ("generator objective", generator_objective(&parts, &LossWeights::default()), 1.3),
        ("discriminator objective", discriminator_objective(&parts), -0.5),
    ];
    let bad: Vec<&str> = checks.iter().filter(|(_, got, want)| !close(*got, *want)).map(|c| c.0).collect();
    verdict(
        3,
        "closed-form loss values",
        bad.is_empty(),
        &format!("{} values checked, mismatches {bad:?}", checks.len()),
    );
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct TransferAblation {
    arms: Vec<ArmSummary>,
    elapsed: Duration,
}

fn default_data() -> &'static MultimodalDataset {
    static DATA: OnceLock<MultimodalDataset> = OnceLock::new();
    DATA.get_or_init(|| generate_synthetic(&ExperimentConfig::default().data).expect("default data"))
}

fn transfer_ablation() -> &'static TransferAblation {
    static RESULT: OnceLock<TransferAblation> = OnceLock::new();
    RESULT.get_or_init(|| {
        let start = Instant::now();
        let arms = run_ablation(&ExperimentConfig::default(), default_data(), AblationAxis::Transfer, &SEEDS, 1);
        TransferAblation {
            arms,
            elapsed: start.elapsed(),
        }
    })
}

fn arm_map(arms: &[ArmSummary], name: &str) -> f64 {
    arms.iter()
        .find(|a| a.arm == name)
        .and_then(ArmSummary::mean_map)
        .unwrap_or(f64::NAN)
}

#[test]
fn criterion_04_transfer_ordering() {
    let r = transfer_ablation();
    let [value, diff, product, none] = ["value", "difference", "product", "none"].map(|a| arm_map(&r.arms, a));
    let pass = diff - none >= 0.05 && diff >= value && r.elapsed < Duration::from_secs(15 * 60);
    verdict(
        4,
        "transfer-benefit ordering",
        pass,
        &format!(
            "5-seed mAP value {value:.4} difference {diff:.4} product {product:.4} none {none:.4}; \
             difference-none {:+.4}, difference-value {:+.4}, {:.0}s",
            diff - none,
            diff - value,
            r.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_05_similarity_source_ordering() {
    let base = ExperimentConfig::default();
    assert_eq!(base.transfer.source, SimilaritySource::Siamese);
    // the default config is the Siamese-sourced arm of the transfer ablation
    let siamese = arm_map(&transfer_ablation().arms, "difference");
    let mut euclid_cfg = base.clone();
    euclid_cfg.transfer.source = SimilaritySource::Euclidean;
    let mut ks = euclid_cfg.eval.ks.clone();
    ks.push(1);
    euclid_cfg.eval.ks = ks;
    let euclid = arm_map(
        &run_arms(&[("euclidean".into(), euclid_cfg)], default_data(), &SEEDS, 1),
        "euclidean",
    );
    verdict(
        5,
        "similarity-source ordering",
        siamese >= euclid - 0.01,
        &format!("5-seed mAP siamese {siamese:.4} euclidean {euclid:.4}, margin {:+.4}", siamese - euclid),
    );
}

#[test]
fn criterion_06_difference_shift_invariance() {
    let mut rng = Rng::stream(6, "acceptance/shift");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = TransferTerms {
            intra: rng.normal().abs() * 2.0,
            paired: rng.normal().abs() * 2.0,
            cross: rng.normal().abs() * 2.0,
        };
        let delta = rng.normal() * 5.0;
        let shifted = TransferTerms {
            paired: t.paired + delta,
            cross: t.cross + delta,
            ..t
        };
        let a = transfer_loss_difference(&[t], 1.0);
        let b = transfer_loss_difference(&[shifted], 1.0);
        worst = worst.max((a - b).abs());
    }
    verdict(
        6,
        "difference shift invariance",
        worst <= 1e-12,
        &format!("1000 triples, max change {worst:.1e}"),
    );
}

fn small_data(n_pairs: usize) -> MultimodalDataset {
    generate_synthetic(&SyntheticConfig {
        n_classes: 4,
        n_pairs,
        d_v: 24,
        d_t: 16,
        latent_dim: 6,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.model.generator_hidden = vec![32];
    cfg.model.common_dim = 16;
    cfg.siamese.hidden = vec![32];
    cfg.siamese.embed_dim = 8;
    cfg.strategy.siamese_pretrain_epochs = 3;
    cfg.epochs = 10;
    cfg.batch_size = 32;
    cfg.eval.ks = vec![1, 5];
    cfg.eval.snapshot_every = 2;
    cfg
}

#[test]
fn criterion_07_discriminator_identity() {
    let data = small_data(240);
    let cfg = small_config();
    let mut trainer = Trainer::new(&cfg, &data).unwrap();
    trainer.run_until(0, &mut |_| Ok(())).unwrap();
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    let mut epochs = 0;
    while trainer.epoch() < cfg.epochs {
        let rec = trainer
            .train_epoch_observed(&mut |s| {
                worst = worst.max((s.l_d + (s.l_v - s.l_t)).abs());
                steps += 1;
            })
            .unwrap();
        let (l_d, l_v, l_t) = (rec.l_d.unwrap(), rec.l_v.unwrap(), rec.l_t.unwrap());
        worst = worst.max((l_d + (l_v - l_t)).abs());
        epochs += 1;
    }
    verdict(
        7,
        "L_D = -(L_V - L_T)",
        worst <= 1e-12 && steps > 0,
        &format!("{steps} steps and {epochs} epoch means, max deviation {worst:.1e}"),
    );
}

fn cmst(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_cmst"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .status()
        .expect("cmst runs");
    assert!(status.success(), "cmst {args:?} exited with {status}");
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn criterion_08_determinism_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut cfg = small_config();
    cfg.data = SyntheticConfig {
        n_classes: 4,
        n_pairs: 240,
        d_v: 24,
        d_t: 16,
        latent_dim: 6,
        ..SyntheticConfig::default()
    };
    cfg.epochs = 6;
    let cfg_path = root.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()).unwrap();
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let c = cfg_path.to_string_lossy().into_owned();
    cmst(&["gen-data", "--config", &c, "--out", &p("data")]);
    let data = p("data");
    for run in ["a", "b", "r"] {
        let mut args = vec!["train", "--config", &c, "--data", &data];
        let out = p(run);
        args.extend(["--out", &out]);
        if run == "r" {
            let mut first = args.clone();
            first.extend(["--stop-after", "3"]);
            cmst(&first);
            let ckpt = p("r/checkpoint.bin");
            args.extend(["--resume", &ckpt]);
            cmst(&args);
        } else {
            cmst(&args);
        }
    }
    let same = |f: &str, x: &str, y: &str| read(&root.join(x).join(f)) == read(&root.join(y).join(f));
    let repeat = same("metrics.jsonl", "a", "b") && same("report.json", "a", "b");
    let resume = same("metrics.jsonl", "a", "r") && same("report.json", "a", "r") && same("checkpoint.bin", "a", "r");
    verdict(
        8,
        "determinism and resume",
        repeat && resume,
        &format!("repeat runs identical: {repeat}; resume at epoch 3 identical: {resume}"),
    );
}

fn random_orthogonal(rng: &mut Rng, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn isometry(m: &Matrix<f64>, q: &[Vec<f64>], shift: &[f64]) -> Matrix<f64> {
    let rows: Vec<Vec<f64>> = m
        .iter_rows()
        .map(|r| {
            q.iter()
                .zip(shift)
                .map(|(qi, s)| qi.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() + s)
                .collect()
        })
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

#[test]
fn criterion_09_isometry_invariance() {
    let data = small_data(240);
    let mut cfg = small_config();
    cfg.epochs = 3;
    let mut trainer = Trainer::new(&cfg, &data).unwrap();
    trainer.run_until(cfg.epochs, &mut |_| Ok(())).unwrap();
    let test = data.test_indices();
    let (s_v, s_t) = trainer
        .models
        .generators
        .project(&data.v.select_rows(test), &data.t.select_rows(test))
        .unwrap();
    let all = data.labels();
    let labels: Vec<usize> = test.iter().map(|&i| all[i]).collect();
    let mut rng = Rng::stream(9, "acceptance/isometry");
    let d = s_v.cols();
    let q = random_orthogonal(&mut rng, d);
    let shift: Vec<f64> = (0..d).map(|_| 10.0 * rng.normal()).collect();
    let ks = [1, 5, 10];
    let truncs = [None, Some(10)];
    let before = evaluate_embeddings(&s_v, &s_t, &labels, &ks, &truncs, 0, "").unwrap();
    let after = evaluate_embeddings(&isometry(&s_v, &q, &shift), &isometry(&s_t, &q, &shift), &labels, &ks, &truncs, 0, "")
        .unwrap();
    let mut worst: f64 = 0.0;
    for (a, b) in before.map.iter().zip(&after.map) {
        for (x, y) in [(a.img2txt, b.img2txt), (a.txt2img, b.txt2img), (a.avg, b.avg)] {
            worst = worst.max((x.0 - y.0).abs());
        }
    }
    for (a, b) in before.topk.iter().zip(&after.topk) {
        for (x, y) in [(a.img2txt, b.img2txt), (a.txt2img, b.txt2img), (a.avg, b.avg)] {
            worst = worst.max((x.0 - y.0).abs());
        }
    }
    verdict(
        9,
        "isometry invariance",
        worst <= 1e-9,
        &format!("{} test pairs in {d} dims, max metric change {worst:.1e}", labels.len()),
    );
}

#[test]
fn criterion_10_strategy_mechanics() {
    let data = small_data(160);
    let run = |kind| {
        let mut cfg = small_config();
        cfg.epochs = 4;
        cfg.strategy.kind = kind;
        let mut records = Vec::new();
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        trainer
            .run_until(cfg.epochs, &mut |r| {
                records.push(r.clone());
                Ok(())
            })
            .unwrap();
        (cfg, records)
    };
    let mut problems = Vec::new();

    let (_, two) = run(StrategyKind::TwoStage);
    let pre: Vec<_> = two.iter().filter(|r| r.phase == Phase::Pretrain).collect();
    let main: Vec<_> = two.iter().filter(|r| r.phase == Phase::Main).collect();
    let frozen = pre.last().and_then(|r| r.siamese_digest.clone());
    if pre.len() != 3 || frozen.is_none() {
        problems.push("two-stage: pretraining not logged");
    }
    if main.iter().any(|r| r.siamese_digest != frozen || r.siamese_lr.is_some()) {
        problems.push("two-stage: siamese parameters changed after pretraining");
    }

    let (_, fine) = run(StrategyKind::FineTune);
    let main: Vec<_> = fine.iter().filter(|r| r.phase == Phase::Main).collect();
    if fine.iter().filter(|r| r.phase == Phase::Pretrain).count() != 3 {
        problems.push("fine-tune: pretraining not logged");
    }
    if main.iter().any(|r| r.siamese_lr != Some(1e-4)) {
        problems.push("fine-tune: siamese learning rate is not 1e-4");
    }
    let digests: Vec<_> = fine.iter().map(|r| r.siamese_digest.clone()).collect();
    if digests.windows(2).skip(2).any(|w| w[0] == w[1]) {
        problems.push("fine-tune: siamese parameters not updated");
    }

    let (e2e_cfg, e2e) = run(StrategyKind::EndToEnd);
    if e2e.iter().any(|r| r.phase == Phase::Pretrain) {
        problems.push("end-to-end: pretraining phase present");
    }
    if e2e.iter().any(|r| r.siamese_lr != Some(e2e_cfg.siamese.optimizer.learning_rate)) {
        problems.push("end-to-end: siamese nets not trained jointly");
    }

    verdict(
        10,
        "strategy mechanics",
        problems.is_empty(),
        &if problems.is_empty() {
            "two-stage frozen bit-exactly, fine-tune at lr 1e-4, end-to-end without pretraining".to_string()
        } else {
            problems.join("; ")
        },
    );
}
