//! `viseme-decode`: run pipeline stages against a work directory.
//!
//! Exit codes: 0 success, 1 invalid input or config (including a missing
//! prior stage), 2 file-system failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use viseme_core::dataset::Dataset;
use viseme_core::decoder::{Checkpoint, TrainConfig};
use viseme_core::pipeline::{
    apply_override, predict_dataset, train_dataset, Logger, Pipeline, PipelineConfig, PipelineError, Stage,
};
use viseme_core::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(name = "viseme-decode", version, about = "Viseme decoding from EEG/EMG recordings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Pipeline config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus. With --out, --config is a synth config.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Read recordings and TextGrids from raw_dir.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Band-pass and notch filter every recording.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        lo: Option<f64>,
        #[arg(long)]
        hi: Option<f64>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long = "notch-q")]
        notch_q: Option<f64>,
    },
    /// Cut fixed-length trials per (modality, window).
    Epoch {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train decoders. With --dataset/--out, --config is a train config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, requires = "out")]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "dataset")]
        out: Option<PathBuf>,
    },
    /// Score held-out trials. With --checkpoint/--dataset/--out, runs on one dataset.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, requires_all = ["dataset", "out"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        out: Option<PathBuf>,
    },
    /// Compute accuracy, F1 and AUC from predictions.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Match predicted viseme sequences to catalog sentences.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write report.{txt,json,csv}.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Every stage in order.
    All {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn pipeline_config(args: &ConfigArgs) -> Result<PipelineConfig> {
    let cfg = match &args.config {
        Some(path) => PipelineConfig::load(path, &args.set)?,
        None => PipelineConfig::from_json_with("{}", &args.set)?,
    };
    Ok(cfg)
}

/// Reads a standalone JSON config (or `{}`) with overrides applied.
fn module_config<T: for<'de> serde::Deserialize<'de>>(args: &ConfigArgs) -> Result<T> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?,
        None => "{}".to_string(),
    };
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
    for o in &args.set {
        apply_override(&mut value, o)?;
    }
    Ok(serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))?)
}

fn run_stage(args: &ConfigArgs, stage: Stage, tweak: impl FnOnce(&mut PipelineConfig)) -> Result<()> {
    let mut cfg = pipeline_config(args)?;
    tweak(&mut cfg);
    cfg.validate()?;
    Pipeline::new(cfg, Logger::stderr()).run(stage)?;
    Ok(())
}

fn standalone_synth(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg: SynthConfig = module_config(args)?;
    let corpus = synth::emit(&cfg, out).map_err(PipelineError::from)?;
    eprintln!("{}", json!({ "stage": "synth", "event": "corpus", "sentences": corpus.sentences.len() }));
    Ok(())
}

fn standalone_train(args: &ConfigArgs, dataset: &Path, out: &Path) -> Result<()> {
    let cfg: TrainConfig = module_config(args)?;
    let ds = Dataset::load(dataset).map_err(PipelineError::from)?;
    let ckpt = train_dataset(&ds, &cfg, |e, _| {
        eprintln!(
            "{}",
            json!({ "stage": "train", "event": "epoch", "epoch": e.epoch, "loss": e.mean.total, "cls": e.mean.cls })
        )
    })?;
    ckpt.save(out).map_err(PipelineError::from)?;
    Ok(())
}

fn standalone_predict(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).map_err(PipelineError::from)?;
    let ds = Dataset::load(dataset).map_err(PipelineError::from)?;
    let preds = predict_dataset(&ckpt, &ds)?;
    preds.save(out).map_err(PipelineError::from)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { cfg, out: Some(out) } => standalone_synth(&cfg, &out).context("synth"),
        Command::Synth { cfg, out: None } => run_stage(&cfg, Stage::Synth, |_| {}),
        Command::Ingest { cfg } => run_stage(&cfg, Stage::Ingest, |_| {}),
        Command::Preprocess { cfg, lo, hi, order, notch_q } => run_stage(&cfg, Stage::Preprocess, |c| {
            let f = &mut c.filter;
            f.lo = lo.unwrap_or(f.lo);
            f.hi = hi.unwrap_or(f.hi);
            f.order = order.unwrap_or(f.order);
            f.notch_q = notch_q.unwrap_or(f.notch_q);
        }),
        Command::Epoch { cfg } => run_stage(&cfg, Stage::Epoch, |_| {}),
        Command::Train { cfg, dataset: Some(ds), out: Some(out) } => standalone_train(&cfg, &ds, &out).context("train"),
        Command::Train { cfg, .. } => run_stage(&cfg, Stage::Train, |_| {}),
        Command::Predict { checkpoint: Some(ck), dataset: Some(ds), out: Some(out), .. } => {
            standalone_predict(&ck, &ds, &out).context("predict")
        }
        Command::Predict { cfg, .. } => run_stage(&cfg, Stage::Predict, |_| {}),
        Command::Eval { cfg } => run_stage(&cfg, Stage::Eval, |_| {}),
        Command::Reconstruct { cfg } => run_stage(&cfg, Stage::Reconstruct, |_| {}),
        Command::Report { cfg } => run_stage(&cfg, Stage::Report, |_| {}),
        Command::All { cfg } => {
            let cfg = pipeline_config(&cfg)?;
            Pipeline::new(cfg, Logger::stderr()).run_all()?;
            Ok(())
        }
    }
}

/// Forwards library warnings to stderr as JSON lines.
struct JsonLog;

impl log::Log for JsonLog {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Warn
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            eprintln!(
                "{}",
                json!({ "event": "log", "level": r.level().as_str(), "target": r.target(), "message": r.args().to_string() })
            );
        }
    }

    fn flush(&self) {}
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<PipelineError>() {
        Some(e) if e.is_io() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let _ = log::set_logger(&JsonLog).map(|()| log::set_max_level(log::LevelFilter::Warn));
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
