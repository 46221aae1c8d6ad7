//! Experiment orchestration: strategies, the alternating update loop,
//! checkpoints, metric logs and ablations.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod trainer;

use std::path::{Path, PathBuf};

use serde::Serialize;

pub use checkpoint::Checkpoint;
pub use config::{
    EvalConfig, ExperimentConfig, ModelConfig, SimilaritySource, StrategyKind, TrainingStrategy, TransferConfig,
};
pub use metrics::{read_metrics, EpochRecord, EvalSnapshot, MetricsWriter, Phase};
pub use trainer::{Models, StepRecord, Trainer};

use crate::common_space::TransferMode;
use crate::datagen::MultimodalDataset;
use crate::error::{CmstError, Result};
use crate::eval::{Fixed6, RetrievalReport};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Checkpoint to resume from.
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many main epochs are done.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Present once every configured epoch has run.
    pub report: Option<RetrievalReport>,
    pub report_path: Option<PathBuf>,
    /// Records written by this invocation.
    pub records: Vec<EpochRecord>,
}

fn keep_record(r: &EpochRecord, pretrain_done: usize, epoch: usize) -> bool {
    match r.phase {
        Phase::Pretrain => r.epoch < pretrain_done,
        Phase::Main => r.epoch < epoch,
    }
}

/// Runs `cfg` on `data`, writing `metrics.jsonl`, `checkpoint.bin` and
/// `report.json` into `out_dir`. Metrics are flushed epoch by epoch, so a
/// divergence abort leaves the log up to the failing epoch.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    data: &MultimodalDataset,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| CmstError::io(out_dir, e))?;
    let mut trainer = Trainer::new(cfg, data)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let mut writer = match &opts.resume {
        Some(ckpt) => {
            trainer.load_checkpoint(ckpt)?;
            // drop anything logged after the checkpoint was taken
            let kept: Vec<EpochRecord> = if metrics_path.exists() {
                read_metrics(&metrics_path)?
                    .into_iter()
                    .filter(|r| keep_record(r, trainer.pretrain_epochs_done(), trainer.epoch()))
                    .collect()
            } else {
                Vec::new()
            };
            let mut w = MetricsWriter::create(&metrics_path)?;
            for r in &kept {
                w.write(r)?;
            }
            w
        }
        None => MetricsWriter::create(&metrics_path)?,
    };

    let until = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let every = cfg.checkpoint_every;
    let mut records = Vec::new();
    {
        let mut sink = |r: &EpochRecord| -> Result<()> {
            writer.write(r)?;
            records.push(r.clone());
            Ok(())
        };
        // step one epoch at a time so periodic checkpoints see the live state
        while !trainer.is_pretrained() || trainer.epoch() < until {
            let before = trainer.epoch();
            let next = if trainer.is_pretrained() { before + 1 } else { before };
            trainer.run_until(next, &mut sink)?;
            let e = trainer.epoch();
            if every > 0 && e > before && e % every == 0 {
                trainer.save_checkpoint(&out_dir.join(format!("checkpoint_epoch_{e:03}.bin")))?;
            }
        }
    }
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    trainer.save_checkpoint(&checkpoint)?;

    let (report, report_path) = if trainer.epoch() >= cfg.epochs {
        let report = trainer.evaluate()?;
        let path = out_dir.join(REPORT_FILE);
        std::fs::write(&path, report.to_json()).map_err(|e| CmstError::io(&path, e))?;
        (Some(report), Some(path))
    } else {
        (None, None)
    };
    Ok(RunOutcome {
        checkpoint,
        metrics: metrics_path,
        report,
        report_path,
        records,
    })
}

/// Trains in memory without writing any files; returns the final report and
/// every epoch record.
pub fn train_in_memory(cfg: &ExperimentConfig, data: &MultimodalDataset) -> Result<(RetrievalReport, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(cfg, data)?;
    let mut records = Vec::new();
    trainer.run_until(cfg.epochs, &mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((trainer.evaluate()?, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Value, difference, product and no transfer.
    Transfer,
    /// Cosine, raw Euclidean and Siamese intra-modal distances.
    Source,
    /// Two-stage, fine-tune and end-to-end.
    Strategy,
}

impl std::str::FromStr for AblationAxis {
    type Err = CmstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transfer" => Ok(AblationAxis::Transfer),
            "source" => Ok(AblationAxis::Source),
            "strategy" => Ok(AblationAxis::Strategy),
            _ => Err(CmstError::config("axis", format!("unknown ablation axis `{s}`"))),
        }
    }
}

/// Named configurations for every arm of `axis`, in table order.
pub fn ablation_arms(base: &ExperimentConfig, axis: AblationAxis) -> Vec<(String, ExperimentConfig)> {
    match axis {
        AblationAxis::Transfer => [
            TransferMode::Value,
            TransferMode::Difference,
            TransferMode::Product,
            TransferMode::None,
        ]
        .into_iter()
        .map(|m| {
            let mut c = base.clone();
            c.transfer.mode = m;
            (m.name().to_string(), c)
        })
        .collect(),
        AblationAxis::Source => SimilaritySource::ALL
            .into_iter()
            .map(|s| {
                let mut c = base.clone();
                c.transfer.source = s;
                (s.name().to_string(), c)
            })
            .collect(),
        AblationAxis::Strategy => StrategyKind::ALL
            .into_iter()
            .map(|k| {
                let mut c = base.clone();
                c.strategy.kind = k;
                (k.name().to_string(), c)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub map_img2txt: Fixed6,
    pub map_txt2img: Fixed6,
    pub map_avg: Fixed6,
    pub top1_avg: Fixed6,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: Vec<SeedResult>,
    pub mean_map_img2txt: Option<Fixed6>,
    pub mean_map_txt2img: Option<Fixed6>,
    pub mean_map_avg: Option<Fixed6>,
    pub mean_top1_avg: Option<Fixed6>,
    /// Set when any seed of this arm failed; other arms are unaffected.
    pub error: Option<String>,
}

impl ArmSummary {
    pub fn mean_map(&self) -> Option<f64> {
        self.mean_map_avg.map(|x| x.0)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn run_arm(name: &str, cfg: &ExperimentConfig, data: &MultimodalDataset, seeds: &[u64]) -> ArmSummary {
    let mut runs = Vec::new();
    let mut error = None;
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        c.eval.snapshot_every = 0;
        match train_in_memory(&c, data) {
            Ok((report, _)) => {
                let row = report.map_at(None).unwrap_or(&report.map[0]);
                runs.push(SeedResult {
                    seed,
                    map_img2txt: row.img2txt,
                    map_txt2img: row.txt2img,
                    map_avg: row.avg,
                    top1_avg: report.topk_at(1).map(|t| t.avg).unwrap_or(Fixed6(f64::NAN)),
                });
            }
            Err(e) => {
                error = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    let ok = error.is_none();
    let m = |f: fn(&SeedResult) -> f64| if ok { mean(runs.iter().map(f)).map(Fixed6) } else { None };
    ArmSummary {
        arm: name.to_string(),
        mean_map_img2txt: m(|r| r.map_img2txt.0),
        mean_map_txt2img: m(|r| r.map_txt2img.0),
        mean_map_avg: m(|r| r.map_avg.0),
        mean_top1_avg: m(|r| r.top1_avg.0),
        runs,
        error,
    }
}

/// Runs every arm of `axis` over `seeds`, using up to `workers` threads.
/// Results come back in arm order regardless of scheduling.
pub fn run_ablation(
    base: &ExperimentConfig,
    data: &MultimodalDataset,
    axis: AblationAxis,
    seeds: &[u64],
    workers: usize,
) -> Vec<ArmSummary> {
    let mut ks = base.eval.ks.clone();
    if !ks.contains(&1) {
        ks.push(1);
    }
    let arms: Vec<(String, ExperimentConfig)> = ablation_arms(base, axis)
        .into_iter()
        .map(|(n, mut c)| {
            c.eval.ks = ks.clone();
            (n, c)
        })
        .collect();
    run_arms(&arms, data, seeds, workers)
}

/// Runs explicit arms over `seeds`; see [`run_ablation`].
pub fn run_arms(
    arms: &[(String, ExperimentConfig)],
    data: &MultimodalDataset,
    seeds: &[u64],
    workers: usize,
) -> Vec<ArmSummary> {
    let workers = workers.clamp(1, arms.len().max(1));
    if workers == 1 {
        return arms.iter().map(|(n, c)| run_arm(n, c, data, seeds)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<ArmSummary>> = vec![None; arms.len()];
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= arms.len() {
                    break;
                }
                let summary = run_arm(&arms[i].0, &arms[i].1, data, seeds);
                results.lock().expect("result lock")[i] = Some(summary);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every arm ran")).collect()
}

/// Plain-text comparison table, one row per arm.
pub fn ablation_table(summaries: &[ArmSummary]) -> String {
    let mut out = format!(
        "{:<12} {:>9} {:>9} {:>9} {:>9}\n",
        "Arm", "Img2txt", "Txt2Img", "Avg.", "Top-1"
    );
    let cell = |x: Option<Fixed6>| x.map(|v| format!("{:.4}", v.0)).unwrap_or_else(|| "failed".into());
    for s in summaries {
        out.push_str(&format!(
            "{:<12} {:>9} {:>9} {:>9} {:>9}\n",
            s.arm,
            cell(s.mean_map_img2txt),
            cell(s.mean_map_txt2img),
            cell(s.mean_map_avg),
            cell(s.mean_top1_avg)
        ));
    }
    out
}
