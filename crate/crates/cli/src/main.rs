//! `cmst`: generate synthetic data, train, evaluate, run ablations and
//! check gradients. Every command writes a manifest next to its outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cmst_core::common_space::{CrossMetric, TransferMode};
use cmst_core::datagen::{generate_synthetic, load_dataset, save_dataset, MultimodalDataset};
use cmst_core::gradsuite::{run_gradsuite, CheckedLoss, GradSuiteConfig};
use cmst_core::training::{
    ablation_table, run_ablation, run_experiment, AblationAxis, ExperimentConfig, RunOptions, SimilaritySource,
    StrategyKind, Trainer,
};
use cmst_core::CmstError;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGED: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(name = "cmst", version, about = "Cross-modal similarity transfer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Evaluate(EvaluateArgs),
    /// Compare the arms of one ablation axis over shared seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the fully resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelFlags {
    /// value | difference | product | none
    #[arg(long)]
    transfer: Option<TransferMode>,
    /// two-stage | fine-tune | end-to-end
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// siamese | euclidean | cosine
    #[arg(long)]
    source: Option<SimilaritySource>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resume from a checkpoint written by an earlier run of the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many main epochs, leaving a checkpoint to resume from.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated k values, e.g. 1,5,10,50.
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// none | <L> | both (full ranking and L = 50)
    #[arg(long)]
    truncation: Option<String>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// transfer | source | strategy
    #[arg(long, default_value = "transfer")]
    axis: AblationAxis,
    /// Comma-separated training seeds shared by every arm.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Worker threads; arms are joined in table order.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    configs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Test hook: corrupt the analytic gradient of one loss.
    #[arg(long, hide = true)]
    corrupt: Option<CheckedLoss>,
}

/// Everything needed to rerun a command.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    tool_version: &'static str,
    seed: u64,
    config: serde_json::Value,
    inputs: serde_json::Value,
    outputs: serde_json::Value,
    notes: Vec<&'static str>,
    status: &'a str,
    duration_secs: f64,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<CmstError> for Failure {
    fn from(e: CmstError) -> Self {
        let code = match &e {
            CmstError::Config { .. } | CmstError::CheckpointMismatch(_) | CmstError::Json(_) => EXIT_CONFIG,
            CmstError::Io { .. }
            | CmstError::BadHeader { .. }
            | CmstError::DimensionMismatch { .. }
            | CmstError::Truncated { .. } => EXIT_IO,
            CmstError::Divergence { .. } => EXIT_DIVERGED,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn required<'p>(flag: &str, value: &'p Option<PathBuf>) -> Result<&'p Path, Failure> {
    value.as_deref().ok_or_else(|| usage(format!("missing required flag --{flag}")))
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CmstError::io(path, e))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_model_flags(cfg: &mut ExperimentConfig, flags: &ModelFlags) {
    if let Some(m) = flags.transfer {
        cfg.transfer.mode = m;
    }
    if let Some(s) = flags.strategy {
        cfg.strategy.kind = s;
    }
    if let Some(s) = flags.source {
        cfg.transfer.source = s;
    }
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
}

/// Prints the config when asked; returns whether the command should stop.
fn print_config(common: &Common, cfg: &ExperimentConfig) -> bool {
    if common.print_config {
        print!("{}", cfg.to_json());
    }
    common.print_config
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| CmstError::io(dir, e).into())
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| CmstError::io(path, e).into())
}

fn config_notes(cfg: &ExperimentConfig) -> Vec<&'static str> {
    let mut notes = vec![match cfg.transfer.metric {
        CrossMetric::SquaredEuclidean => "cross-modal distance: squared euclidean",
        CrossMetric::Euclidean => "cross-modal distance: euclidean",
    }];
    notes.push(match cfg.transfer.source {
        SimilaritySource::Cosine => "intra-modal distance: 1 - cos on raw features",
        SimilaritySource::Euclidean => "intra-modal distance: euclidean on raw features",
        SimilaritySource::Siamese => "intra-modal distance: siamese embedding distance",
    });
    notes.push("mAP truncation denominator: min(n_relevant, L)");
    notes.push("siamese pretraining epochs are counted separately from main epochs");
    notes
}

#[allow(clippy::too_many_arguments)]
fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: Option<&ExperimentConfig>,
    seed: u64,
    inputs: serde_json::Value,
    outputs: serde_json::Value,
    status: &str,
    started: Instant,
) -> Result<(), Failure> {
    let manifest = RunManifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        seed,
        config: cfg.map_or(serde_json::Value::Null, |c| serde_json::to_value(c).expect("config serializes")),
        inputs,
        outputs,
        notes: cfg.map(config_notes).unwrap_or_default(),
        status,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&dir.join(format!("manifest-{command}.json")), &text)
}

fn load_data(dir: &Path) -> Result<MultimodalDataset, Failure> {
    if !dir.is_dir() {
        return Err(CmstError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        )
        .into());
    }
    Ok(load_dataset(dir)?)
}

fn cmd_gen_data(args: &GenDataArgs) -> CmdResult {
    let started = Instant::now();
    let mut cfg = load_config(&args.common)?;
    if let Some(seed) = args.common.seed {
        cfg.data.seed = seed;
    }
    if print_config(&args.common, &cfg) {
        return Ok(());
    }
    cfg.data.validate()?;
    let out = required("out", &args.out)?;
    let dataset = generate_synthetic(&cfg.data)?;
    save_dataset(&dataset, out)?;
    println!(
        "wrote {} pairs ({} train / {} test, {} classes) to {}",
        dataset.len(),
        dataset.train_indices().len(),
        dataset.test_indices().len(),
        dataset.n_classes(),
        out.display()
    );
    write_manifest(
        out,
        "gen-data",
        Some(&cfg),
        cfg.data.seed,
        serde_json::json!({ "config": args.common.config }),
        serde_json::json!({ "dataset": out }),
        "ok",
        started,
    )
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let started = Instant::now();
    let mut cfg = load_config(&args.common)?;
    apply_model_flags(&mut cfg, &args.model);
    if print_config(&args.common, &cfg) {
        return Ok(());
    }
    cfg.validate()?;
    let data_dir = required("data", &args.data)?;
    let out = required("out", &args.out)?;
    let dataset = load_data(data_dir)?;
    create_dir(out)?;
    write_file(&out.join("config.json"), &cfg.to_json())?;
    let opts = RunOptions {
        resume: args.resume.clone(),
        stop_after: args.stop_after,
    };
    let inputs = serde_json::json!({ "config": args.common.config, "data": data_dir, "resume": args.resume });
    let result = run_experiment(&cfg, &dataset, out, &opts);
    let (status, outputs) = match &result {
        Ok(o) => (
            "ok",
            serde_json::json!({ "checkpoint": o.checkpoint, "metrics": o.metrics, "report": o.report_path }),
        ),
        Err(CmstError::Divergence { .. }) => ("diverged", serde_json::json!({ "metrics": out.join("metrics.jsonl") })),
        Err(_) => ("failed", serde_json::Value::Null),
    };
    write_manifest(out, "train", Some(&cfg), cfg.seed, inputs, outputs, status, started)?;
    let outcome = result?;
    match &outcome.report {
        Some(report) => print!("{}", report.summary_table()),
        None => println!("stopped after {} main epochs; checkpoint at {}", args.stop_after.unwrap_or(0), outcome.checkpoint.display()),
    }
    Ok(())
}

fn parse_truncation(value: &str) -> Result<Vec<Option<usize>>, Failure> {
    match value {
        "none" => Ok(vec![None]),
        "both" => Ok(vec![None, Some(50)]),
        n => match n.parse::<usize>() {
            Ok(l) if l > 0 => Ok(vec![Some(l)]),
            _ => Err(usage(format!("--truncation must be none, both or a positive integer, got `{n}`"))),
        },
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> CmdResult {
    let started = Instant::now();
    let checkpoint = required("checkpoint", &args.checkpoint)?;
    let ckpt_dir = checkpoint.parent().unwrap_or(Path::new("."));
    // the training run stores its resolved config beside the checkpoint
    let common_config = args.common.config.clone().or_else(|| Some(ckpt_dir.join("config.json")));
    let mut cfg = load_config(&Common {
        config: common_config.clone(),
        seed: args.common.seed,
        print_config: args.common.print_config,
    })?;
    apply_model_flags(&mut cfg, &args.model);
    if let Some(ks) = &args.ks {
        cfg.eval.ks = ks.clone();
    }
    if let Some(t) = &args.truncation {
        cfg.eval.truncations = parse_truncation(t)?;
    }
    if print_config(&args.common, &cfg) {
        return Ok(());
    }
    cfg.validate()?;
    let data_dir = required("data", &args.data)?;
    let dataset = load_data(data_dir)?;
    let mut trainer = Trainer::new(&cfg, &dataset)?;
    trainer.load_checkpoint(checkpoint)?;
    let report = trainer.evaluate()?;
    let out = args.out.as_deref().unwrap_or(ckpt_dir);
    create_dir(out)?;
    let report_path = out.join("eval_report.json");
    write_file(&report_path, &report.to_json())?;
    print!("{}", report.to_json());
    eprint!("{}", report.summary_table());
    write_manifest(
        out,
        "evaluate",
        Some(&cfg),
        cfg.seed,
        serde_json::json!({ "config": common_config, "checkpoint": checkpoint, "data": data_dir }),
        serde_json::json!({ "report": report_path }),
        "ok",
        started,
    )
}

fn cmd_ablate(args: &AblateArgs) -> CmdResult {
    let started = Instant::now();
    let mut cfg = load_config(&args.common)?;
    apply_model_flags(&mut cfg, &args.model);
    if print_config(&args.common, &cfg) {
        return Ok(());
    }
    cfg.validate()?;
    if args.seeds.is_empty() {
        return Err(usage("--seeds needs at least one seed"));
    }
    let data_dir = required("data", &args.data)?;
    let out = required("out", &args.out)?;
    let dataset = load_data(data_dir)?;
    create_dir(out)?;
    let summaries = run_ablation(&cfg, &dataset, args.axis, &args.seeds, args.workers);
    let table = ablation_table(&summaries);
    print!("{table}");
    let json = serde_json::to_string_pretty(&summaries).expect("summaries serialize") + "\n";
    write_file(&out.join("ablation.json"), &json)?;
    write_file(&out.join("ablation.txt"), &table)?;
    let failed = summaries.iter().filter(|s| s.error.is_some()).count();
    for s in summaries.iter().filter(|s| s.error.is_some()) {
        eprintln!("arm {} failed: {}", s.arm, s.error.as_deref().unwrap_or_default());
    }
    write_manifest(
        out,
        "ablate",
        Some(&cfg),
        cfg.seed,
        serde_json::json!({ "config": args.common.config, "data": data_dir, "axis": format!("{:?}", args.axis).to_lowercase(), "seeds": args.seeds }),
        serde_json::json!({ "ablation": out.join("ablation.json"), "table": out.join("ablation.txt") }),
        if failed == 0 { "ok" } else { "partial" },
        started,
    )
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CmdResult {
    let started = Instant::now();
    let cfg = GradSuiteConfig {
        seed: args.seed,
        configs_per_loss: args.configs,
        corrupt: args.corrupt,
        ..GradSuiteConfig::default()
    };
    let report = run_gradsuite(&cfg)?;
    print!("{}", report.table());
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_file(&out.join("gradcheck.json"), &report.to_json())?;
        write_manifest(
            out,
            "gradcheck",
            None,
            args.seed,
            serde_json::json!({ "configs_per_loss": args.configs }),
            serde_json::json!({ "report": out.join("gradcheck.json") }),
            if report.passed() { "ok" } else { "failed" },
            started,
        )?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|l| l.name()).collect();
        Err(Failure {
            code: EXIT_GRADCHECK,
            message: format!("gradient check failed for: {}", names.join(", ")),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
