//! Stage orchestration over a work directory: synth → ingest → preprocess →
//! epoch → train → predict → eval → reconstruct → report.
//!
//! Every stage reads the previous stage's manifest from the work directory
//! and writes its own, so stages can be rerun in isolation.

mod stages;

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::alignment::AlignmentError;
use crate::dataset::{window_len, DatasetError, EpochOptions, Modality};
use crate::decoder::{DecoderError, TrainConfig};
use crate::dsp::{DspError, PreprocessParams};
use crate::eval::{EvalError, ReportMode};
use crate::reconstruct::{ReconstructError, SeqModelConfig};
use crate::signal_io::SignalIoError;
use crate::synth::{SynthConfig, SynthError};

pub use stages::{predict_dataset, train_dataset, CellSummary, ReconstructionReport, SentenceOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("stage `{stage}` has not been run (missing {path}); run `viseme-decode {stage}` first")]
    MissingStage { stage: Stage, path: String },
    #[error("work directory is locked by {0}; another run is active or the lock is stale")]
    Locked(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Signal(#[from] SignalIoError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl PipelineError {
    /// True when the failure is the file system's rather than the input's.
    pub fn is_io(&self) -> bool {
        fn signal(e: &SignalIoError) -> bool {
            matches!(e, SignalIoError::Io { .. })
        }
        match self {
            PipelineError::Io { .. } | PipelineError::Locked(_) => true,
            PipelineError::Signal(e) => signal(e),
            PipelineError::Alignment(e) => matches!(e, AlignmentError::Io { .. }),
            PipelineError::Dsp(DspError::Recording(e)) => signal(e),
            PipelineError::Dataset(e) => matches!(e, DatasetError::Io { .. }),
            PipelineError::Decoder(e) => matches!(e, DecoderError::Io { .. }),
            PipelineError::Reconstruct(e) => matches!(e, ReconstructError::Io { .. }),
            PipelineError::Eval(e) => matches!(e, EvalError::Io { .. }),
            PipelineError::Synth(e) => match e {
                SynthError::Io { .. } => true,
                SynthError::Signal(s) => signal(s),
                SynthError::Alignment(a) => matches!(a, AlignmentError::Io { .. }),
                SynthError::Catalog(c) => matches!(c, ReconstructError::Io { .. }),
                SynthError::Config(_) => false,
            },
            _ => false,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
        move |source| PipelineError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    Preprocess,
    Epoch,
    Train,
    Predict,
    Eval,
    Reconstruct,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Ingest,
        Stage::Preprocess,
        Stage::Epoch,
        Stage::Train,
        Stage::Predict,
        Stage::Eval,
        Stage::Reconstruct,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Preprocess => "preprocess",
            Stage::Epoch => "epoch",
            Stage::Train => "train",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
            Stage::Reconstruct => "reconstruct",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Recordings and TextGrids (written by `synth`, read by `ingest`).
    pub raw_dir: PathBuf,
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { raw_dir: "raw".into(), work_dir: "work".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub fs: f64,
    pub windows_ms: Vec<u32>,
    pub modalities: Vec<Modality>,
    pub filter: PreprocessParams,
    /// JSON file `{phoneme: class_id}` replacing the built-in map.
    pub viseme_map: Option<PathBuf>,
    pub epoch: EpochOptions,
    /// Sentences held out for testing.
    pub n_test: usize,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub sequence_model: SeqModelConfig,
    pub report_mode: ReportMode,
    /// Whether `all` starts by generating the synthetic corpus into `raw_dir`.
    pub synthesize: bool,
    /// Overrides the seeds of `synth`, `train` and `sequence_model` and drives the split.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            paths: Paths::default(),
            fs: 1000.0,
            windows_ms: crate::dataset::WINDOWS_MS.to_vec(),
            modalities: vec![Modality::EegEmg, Modality::EegOnly],
            filter: PreprocessParams::default(),
            viseme_map: None,
            epoch: EpochOptions::default(),
            n_test: 50,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            sequence_model: SeqModelConfig::default(),
            report_mode: ReportMode::Pct,
            synthesize: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Parses JSON, applies `key.path=value` overrides, then validates.
    pub fn from_json_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(PipelineError::io(path))?;
        Self::from_json_with(&text, overrides)
    }

    /// Pushes the top-level seed into every stochastic stage and validates.
    pub fn resolved(mut self) -> Result<Self> {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.sequence_model.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return bad(format!("fs must be positive, got {}", self.fs));
        }
        if self.synth.fs != self.fs {
            return bad(format!("synth.fs ({}) differs from fs ({})", self.synth.fs, self.fs));
        }
        if self.windows_ms.is_empty() || self.modalities.is_empty() {
            return bad("windows_ms and modalities must be non-empty".into());
        }
        let mut w = self.windows_ms.clone();
        w.sort_unstable();
        w.dedup();
        if w.len() != self.windows_ms.len() {
            return bad("windows_ms has duplicates".into());
        }
        let mut m = self.modalities.clone();
        m.sort();
        m.dedup();
        if m.len() != self.modalities.len() {
            return bad("modalities has duplicates".into());
        }
        for &ms in &self.windows_ms {
            let len = window_len(ms, self.fs).map_err(|e| PipelineError::Config(e.to_string()))?;
            if len % 8 != 0 {
                return bad(format!("window {ms} ms gives {len} samples; the decoder needs a multiple of 8"));
            }
        }
        if self.n_test == 0 {
            return bad("n_test must be positive".into());
        }
        self.filter.design(self.fs).map_err(|e| PipelineError::Config(format!("filter: {e}")))?;
        self.train.validate().map_err(|e| PipelineError::Config(format!("train: {e}")))?;
        self.synth.validate().map_err(|e| PipelineError::Config(format!("synth: {e}")))?;
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &modality in &self.modalities {
            for &window_ms in &self.windows_ms {
                cells.push(Cell { modality, window_ms });
            }
        }
        cells
    }
}

/// One (modality, window) combination: a dataset, a model and a report row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub modality: Modality,
    pub window_ms: u32,
}

impl Cell {
    pub fn slug(&self) -> String {
        format!("{}_{}ms", self.modality.slug(), self.window_ms)
    }
}

/// Sets `a.b.c` in a JSON tree; the value is parsed as JSON, else taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(PipelineError::Config(format!("override key '{key}' is malformed")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(PipelineError::Config(format!(
                "override '{key}': '{}' is not an object",
                parts[..i].join(".")
            )));
        }
        let obj = node.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("loop returns on the last key part")
}

/// Exclusive claim on a work directory, released on drop.
pub struct WorkLock {
    path: PathBuf,
}

impl WorkLock {
    pub const FILE: &'static str = ".lock";

    pub fn acquire(work_dir: &Path) -> Result<Self> {
        fs::create_dir_all(work_dir).map_err(PipelineError::io(work_dir))?;
        let path = work_dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(path.display().to_string()))
            }
            Err(e) => Err(PipelineError::io(&path)(e)),
        }
    }
}

impl Drop for WorkLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// JSON-lines event sink.
pub struct Logger {
    sink: Mutex<Box<dyn Write + Send>>,
    start: Instant,
}

impl Logger {
    pub fn new(sink: Box<dyn Write + Send>) -> Self {
        Logger { sink: Mutex::new(sink), start: Instant::now() }
    }

    pub fn stderr() -> Self {
        Self::new(Box::new(std::io::stderr()))
    }

    pub fn null() -> Self {
        Self::new(Box::new(std::io::sink()))
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(PipelineError::io(path))?;
        Ok(Self::new(Box::new(f)))
    }

    pub fn event(&self, stage: Stage, event: &str, fields: Value) {
        let mut line = json!({
            "stage": stage.name(),
            "event": event,
            "elapsed_s": (self.start.elapsed().as_secs_f64() * 1000.0).round() / 1000.0,
        });
        if let (Some(obj), Value::Object(extra)) = (line.as_object_mut(), fields) {
            obj.extend(extra);
        }
        let mut sink = self.sink.lock().unwrap_or_else(|p| p.into_inner());
        let _ = writeln!(sink, "{line}");
        let _ = sink.flush();
    }
}

pub struct Pipeline {
    pub config: PipelineConfig,
    pub log: Logger,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, log: Logger) -> Self {
        Pipeline { config, log }
    }

    pub fn work(&self) -> &Path {
        &self.config.paths.work_dir
    }

    /// Runs one stage under the work-directory lock.
    pub fn run(&self, stage: Stage) -> Result<()> {
        let _lock = WorkLock::acquire(self.work())?;
        self.run_unlocked(stage)
    }

    /// Runs every stage in order; `synth` only when the config asks for it.
    pub fn run_all(&self) -> Result<()> {
        let _lock = WorkLock::acquire(self.work())?;
        for stage in Stage::ALL {
            if stage == Stage::Synth && !self.config.synthesize {
                continue;
            }
            self.run_unlocked(stage)?;
        }
        Ok(())
    }

    fn run_unlocked(&self, stage: Stage) -> Result<()> {
        self.log.event(stage, "start", json!({}));
        let out = match stage {
            Stage::Synth => stages::synth(self),
            Stage::Ingest => stages::ingest(self),
            Stage::Preprocess => stages::preprocess(self),
            Stage::Epoch => stages::epoch(self),
            Stage::Train => stages::train(self),
            Stage::Predict => stages::predict(self),
            Stage::Eval => stages::eval(self),
            Stage::Reconstruct => stages::reconstruct(self),
            Stage::Report => stages::report(self),
        };
        match &out {
            Ok(()) => self.log.event(stage, "done", json!({})),
            Err(e) => self.log.event(stage, "error", json!({ "message": e.to_string(), "io": e.is_io() })),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_keys() {
        let mut v = json!({"train": {"epochs": 3}});
        apply_override(&mut v, "train.epochs=5").unwrap();
        apply_override(&mut v, "train.optimizer=adam").unwrap();
        apply_override(&mut v, "windows_ms=[64]").unwrap();
        assert_eq!(v["train"]["epochs"], 5);
        assert_eq!(v["train"]["optimizer"], "adam");
        assert_eq!(v["windows_ms"], json!([64]));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "train.epochs.x=1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_json_with("{}", &["trian.epochs=3".into()]).unwrap_err();
        assert!(matches!(err, PipelineError::Config(_)));
        assert!(PipelineConfig::from_json_with("{}", &[]).is_ok());
    }

    #[test]
    fn seed_propagates() {
        let cfg = PipelineConfig::from_json_with(r#"{"seed": 9}"#, &[]).unwrap();
        assert_eq!((cfg.synth.seed, cfg.train.seed, cfg.sequence_model.seed), (9, 9, 9));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = WorkLock::acquire(dir.path()).unwrap();
        assert!(matches!(WorkLock::acquire(dir.path()), Err(PipelineError::Locked(_))));
        drop(a);
        assert!(WorkLock::acquire(dir.path()).is_ok());
    }
}
