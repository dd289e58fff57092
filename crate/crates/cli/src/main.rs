//! `mavr`: dataset generation, training, evaluation and run aggregation.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mavr_core::metrics::render_confusion;
use mavr_core::model::ViewKind;
use mavr_core::synth::{build_dataset, ActionKind, Dataset, DatasetConfig, Split};
use mavr_core::train::{self, Checkpoint, TrainConfig};
use mavr_core::{MavrError, Result};

/// Resolved settings of a command; `--config` files use the same layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

#[derive(Parser)]
#[command(name = "mavr", version, about = "Three-view MAV action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus and extract its views.
    Generate(GenerateArgs),
    /// Train a model and evaluate the selected checkpoint on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Aggregate finished runs into mean and seed std per config.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Clips per class and scale.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    frame_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Clutter background, stronger illumination jitter and pixel noise.
    #[arg(long)]
    noisy: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Comma-separated subset of rgb, flow, mask.
    #[arg(long, value_delimiter = ',')]
    views: Option<Vec<String>>,
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    no_pyramid: bool,
    /// Drop the alignment and attention-entropy terms.
    #[arg(long)]
    no_align: bool,
    #[arg(long)]
    deterministic: bool,
    /// Stop after the first epoch whose test accuracy reaches this value.
    #[arg(long)]
    stop_at: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| MavrError::Io { path: p.to_path_buf(), source: e })?;
            serde_json::from_str(&text).map_err(|source| MavrError::Json { path: p.to_path_buf(), source })
        }
        None => Ok(RunConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MavrError::Io { path: path.to_path_buf(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serialisable") + "\n"))
}

fn threads() -> usize {
    std::env::var("MAVR_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = read_config(args.config.as_deref())?;
    if args.noisy {
        let noisy = DatasetConfig::noisy();
        cfg.dataset.background = noisy.background;
        cfg.dataset.illumination_jitter = noisy.illumination_jitter;
        cfg.dataset.pixel_noise_sigma = noisy.pixel_noise_sigma;
    }
    let d = &mut cfg.dataset;
    if let Some(n) = args.n {
        d.n_per_class_per_scale = n;
    }
    if let Some(s) = args.frame_size {
        d.frame_size = s;
    }
    if let Some(s) = args.seed {
        d.seed = s;
    }
    let manifest = build_dataset(&args.out, d, threads())?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;
    println!("{} clips written to {}", manifest.clips.len(), args.out.display());
    Ok(())
}

fn resolve_train(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = read_config(args.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(s) = args.seed {
        t.seed = s;
    }
    if let Some(e) = args.epochs {
        t.epochs = e;
    }
    if let Some(views) = &args.views {
        t.model.views = views
            .iter()
            .map(|v| ViewKind::parse(v.trim()).ok_or_else(|| MavrError::Config(format!("unknown view {v:?}"))))
            .collect::<Result<_>>()?;
    }
    if args.no_attention {
        t.model.use_attention = false;
    }
    if args.no_pyramid {
        t.model.use_pyramid = false;
    }
    if args.no_align {
        t.lambda1 = 0.0;
        t.lambda2 = 0.0;
    }
    if args.deterministic {
        t.deterministic = true;
    }
    t.validate()?;
    Ok(cfg)
}

fn write_eval(dir: &Path, eval: &train::Evaluation) -> Result<()> {
    let names = ActionKind::names();
    write_json(&dir.join("report.json"), &eval.report)?;
    write_text(&dir.join("confusion.csv"), &render_confusion(&eval.report, &names, false))?;
    write_text(&dir.join("confusion_normalized.csv"), &render_confusion(&eval.report, &names, true))
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve_train(&args)?;
    let dataset = Dataset::open(&args.data)?;
    cfg.dataset = dataset.manifest.config.clone();
    fs::create_dir_all(&args.out).map_err(|e| MavrError::Io { path: args.out.clone(), source: e })?;
    write_json(&args.out.join("resolved_config.json"), &cfg)?;
    let start = std::time::Instant::now();
    let mut elapsed = Vec::new();
    let outcome = train::train(&dataset, &cfg.train, Some(&args.out), |e| {
        elapsed.push(start.elapsed().as_secs_f64());
        eprintln!(
            "epoch {:>3}  train loss {:.4} acc {:.3}  test loss {:.4} acc {:.3}  [{:.0}s]",
            e.epoch,
            e.train_loss,
            e.train_acc,
            e.test_loss,
            e.test_acc,
            start.elapsed().as_secs_f64()
        );
        args.stop_at.map_or(true, |target| e.test_acc < target)
    })?;
    write_json(
        &args.out.join("timing.json"),
        &serde_json::json!({ "elapsed_secs_after_epoch": elapsed, "threads": 1 }),
    )?;
    let eval = train::evaluate(&outcome.checkpoint, &dataset, Split::Test)?;
    write_eval(&args.out, &eval)?;
    println!(
        "selected epoch {} with test accuracy {:.4}; outputs in {}",
        outcome.checkpoint.epoch,
        eval.report.accuracy,
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let split = Split::parse(&args.split).ok_or_else(|| MavrError::Config(format!("unknown split {:?}", args.split)))?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let dataset = Dataset::open(&args.data)?;
    let eval = train::evaluate(&ckpt, &dataset, split)?;
    let out = args
        .out
        .unwrap_or_else(|| args.ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
    fs::create_dir_all(&out).map_err(|e| MavrError::Io { path: out.clone(), source: e })?;
    write_eval(&out, &eval)?;
    write_json(
        &out.join("resolved_config.json"),
        &RunConfig {
            dataset: dataset.manifest.config.clone(),
            train: ckpt.config.clone(),
        },
    )?;
    println!("{} accuracy {:.4} on {} clips", split.name(), eval.report.accuracy, eval.truths.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Report(a) => report::run(&a.runs, a.out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
