//! Classification metrics (top-k accuracy, macro F1, macro one-vs-rest AUC,
//! confusion matrices) and the modality × window report grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::VisemeClass;
use crate::dataset::{Modality, TrialMeta};
use crate::decoder::top_k;
use crate::parallel;

const N_CLASSES: usize = VisemeClass::COUNT;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Domain(String),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_inputs<R: AsRef<[T]>, T>(scores: &[R], labels: &[usize]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(EvalError::Domain(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(row) = scores.iter().find(|r| r.as_ref().len() != N_CLASSES) {
        return Err(EvalError::Domain(format!(
            "score row has {} entries, expected {N_CLASSES}",
            row.as_ref().len()
        )));
    }
    check_labels(labels)
}

fn check_labels(labels: &[usize]) -> Result<()> {
    match labels.iter().find(|&&l| l >= N_CLASSES) {
        Some(l) => Err(EvalError::Domain(format!("label {l} outside 0..{N_CLASSES}"))),
        None => Ok(()),
    }
}

/// Percentage of trials whose label is among the `k` highest logits.
pub fn topk_accuracy<R: AsRef<[f32]>>(logits: &[R], labels: &[usize], k: usize) -> Result<f64> {
    check_inputs(logits, labels)?;
    if k == 0 {
        return Err(EvalError::Domain("k must be at least 1".into()));
    }
    if labels.is_empty() {
        return Err(EvalError::Domain("no trials".into()));
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(l, &y)| top_k(l.as_ref(), k).contains(&y))
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Top-1 predictions with ties going to the lower class id.
pub fn argmax_predictions<R: AsRef<[f32]>>(logits: &[R]) -> Vec<usize> {
    logits.iter().map(|l| top_k(l.as_ref(), 1)[0]).collect()
}

/// `m[true][predicted]`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> Result<Vec<Vec<u64>>> {
    if preds.len() != labels.len() {
        return Err(EvalError::Domain(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    check_labels(preds)?;
    check_labels(labels)?;
    let mut m = vec![vec![0u64; N_CLASSES]; N_CLASSES];
    for (&p, &y) in preds.iter().zip(labels) {
        m[y][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: u8,
    pub support: u64,
    pub predicted: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Summary {
    /// Mean over all 15 classes; absent classes count as 0.
    pub macro_all: f64,
    /// Mean over classes with support or predictions.
    pub macro_present: f64,
    pub per_class: Vec<ClassStats>,
    /// Classes with zero support and zero predictions.
    pub absent: Vec<u8>,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn class_stats(confusion: &[Vec<u64>]) -> Vec<ClassStats> {
    (0..N_CLASSES)
        .map(|c| {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            // F1 = 2tp / (support + predicted), zero when both are empty
            let f1 = ratio(2 * tp, support + predicted);
            ClassStats { class: c as u8, support, predicted, precision, recall, f1 }
        })
        .collect()
}

pub fn macro_f1(preds: &[usize], labels: &[usize]) -> Result<F1Summary> {
    let m = confusion_matrix(preds, labels)?;
    let per_class = class_stats(&m);
    let absent: Vec<u8> = per_class
        .iter()
        .filter(|s| s.support == 0 && s.predicted == 0)
        .map(|s| s.class)
        .collect();
    if !absent.is_empty() && !labels.is_empty() {
        log::warn!("classes {absent:?} have no support and no predictions; scored as F1 = 0");
    }
    let sum: f64 = per_class.iter().map(|s| s.f1).sum();
    let present = N_CLASSES - absent.len();
    Ok(F1Summary {
        macro_all: sum / N_CLASSES as f64,
        macro_present: if present == 0 { 0.0 } else { sum / present as f64 },
        per_class,
        absent,
    })
}

/// Mann-Whitney estimate of P(pos > neg) + ½ P(pos = neg); `None` if either side is empty.
pub fn binary_auc(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum keeps tied average ranks integral
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg2 = (i + 1 + j) as u128;
        let n_pos = all[i..j].iter().filter(|e| e.1).count() as u128;
        rank2_pos += avg2 * n_pos;
        i = j;
    }
    let (np, nn) = (pos.len() as u128, neg.len() as u128);
    let u2 = rank2_pos - np * (np + 1);
    Some(u2 as f64 / (2 * np * nn) as f64)
}

/// Per-class one-vs-rest AUC; `None` where a class lacks positives or negatives.
pub fn ovr_auc_per_class<R: AsRef<[T]> + Sync, T: Copy + Into<f64>>(scores: &[R], labels: &[usize]) -> Result<Vec<Option<f64>>> {
    check_inputs(scores, labels)?;
    Ok(parallel::map_indexed(N_CLASSES, |c| {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (row, &y) in scores.iter().zip(labels) {
            let s: f64 = row.as_ref()[c].into();
            if y == c {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
        binary_auc(&pos, &neg)
    }))
}

/// Macro one-vs-rest AUC ×100 over classes that have both positives and negatives.
pub fn macro_ovr_auc<R: AsRef<[T]> + Sync, T: Copy + Into<f64>>(scores: &[R], labels: &[usize]) -> Result<f64> {
    let per = ovr_auc_per_class(scores, labels)?;
    let valid: Vec<f64> = per.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(EvalError::Domain("no class has both positive and negative trials".into()));
    }
    Ok(100.0 * valid.iter().sum::<f64>() / valid.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub modality: Modality,
    pub window_ms: u32,
    pub n_trials: usize,
    pub top1_pct: f64,
    pub top3_pct: f64,
    /// In [0, 1], mean over all 15 classes.
    pub f1_macro: f64,
    pub f1_macro_present: f64,
    pub auc_pct: f64,
    pub per_class: Vec<ClassStats>,
    pub absent_classes: Vec<u8>,
    pub confusion: Vec<Vec<u64>>,
}

pub fn evaluate<R: AsRef<[f32]> + Sync>(
    logits: &[R],
    labels: &[usize],
    modality: Modality,
    window_ms: u32,
) -> Result<MetricsReport> {
    let preds = argmax_predictions(logits);
    let f1 = macro_f1(&preds, labels)?;
    Ok(MetricsReport {
        modality,
        window_ms,
        n_trials: labels.len(),
        top1_pct: topk_accuracy(logits, labels, 1)?,
        top3_pct: topk_accuracy(logits, labels, 3)?,
        f1_macro: f1.macro_all,
        f1_macro_present: f1.macro_present,
        auc_pct: macro_ovr_auc(logits, labels)?,
        per_class: f1.per_class,
        absent_classes: f1.absent,
        confusion: confusion_matrix(&preds, labels)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrial {
    pub meta: TrialMeta,
    pub logits: Vec<f32>,
    pub top3: Vec<u8>,
}

/// Decoder output for one (modality, window) cell, as stored in predictions.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predictions {
    pub format_version: u32,
    pub modality: Modality,
    pub window_ms: u32,
    pub trials: Vec<PredictedTrial>,
}

impl Predictions {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(modality: Modality, window_ms: u32, metas: &[TrialMeta], logits: Vec<Vec<f32>>) -> Self {
        let trials = metas
            .iter()
            .zip(logits)
            .map(|(meta, logits)| PredictedTrial {
                meta: meta.clone(),
                top3: top_k(&logits, 3).into_iter().map(|c| c as u8).collect(),
                logits,
            })
            .collect();
        Predictions { format_version: Self::FORMAT_VERSION, modality, window_ms, trials }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.meta.label.index()).collect()
    }

    pub fn logits(&self) -> Vec<&[f32]> {
        self.trials.iter().map(|t| t.logits.as_slice()).collect()
    }

    pub fn evaluate(&self) -> Result<MetricsReport> {
        evaluate(&self.logits(), &self.labels(), self.modality, self.window_ms)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: Predictions = read_json(path.as_ref())?;
        if p.format_version != Self::FORMAT_VERSION {
            return Err(EvalError::Format {
                path: path.as_ref().display().to_string(),
                msg: format!("unsupported format_version {}", p.format_version),
            });
        }
        if let Some(t) = p.trials.iter().find(|t| t.logits.len() != N_CLASSES) {
            return Err(EvalError::Format {
                path: path.as_ref().display().to_string(),
                msg: format!("trial {:?} has {} logits", t.meta.sentence_id, t.logits.len()),
            });
        }
        Ok(p)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|source| EvalError::Io { path: path.display().to_string(), source })
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| EvalError::Format { path: path.display().to_string(), msg: e.to_string() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReportMode {
    /// F1 in [0, 1].
    Unit,
    /// F1 ×100, as in the published table.
    #[default]
    Pct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub modality: String,
    pub window_ms: u32,
    pub top1: f64,
    pub top3: f64,
    pub f1: f64,
    pub auc: f64,
    pub n_trials: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportTable {
    pub mode: ReportMode,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub table: ReportTable,
    pub text: String,
    pub json: String,
    pub csv: String,
}

fn modality_rank(m: Modality) -> u8 {
    match m {
        Modality::EegEmg => 0,
        Modality::EegOnly => 1,
    }
}

/// Lays metrics out as rows EEG+EMG then EEG, each by ascending window.
pub fn render_report(metrics: &[MetricsReport], mode: ReportMode) -> Result<RenderedReport> {
    let mut cells: BTreeMap<(u8, u32), &MetricsReport> = BTreeMap::new();
    for m in metrics {
        if cells.insert((modality_rank(m.modality), m.window_ms), m).is_some() {
            return Err(EvalError::Domain(format!(
                "duplicate report cell {} / {} ms",
                m.modality.label(),
                m.window_ms
            )));
        }
    }
    let f1_scale = match mode {
        ReportMode::Unit => 1.0,
        ReportMode::Pct => 100.0,
    };
    let rows: Vec<ReportRow> = cells
        .values()
        .map(|m| ReportRow {
            modality: m.modality.label().to_string(),
            window_ms: m.window_ms,
            top1: m.top1_pct,
            top3: m.top3_pct,
            f1: m.f1_macro * f1_scale,
            auc: m.auc_pct,
            n_trials: m.n_trials,
        })
        .collect();
    let table = ReportTable { mode, rows };
    let text = render_text(&table);
    let csv = render_csv(&table);
    let json = serde_json::to_string_pretty(&table).expect("serializable table") + "\n";
    Ok(RenderedReport { table, text, json, csv })
}

fn render_text(table: &ReportTable) -> String {
    let mut out = String::new();
    let f1_head = match table.mode {
        ReportMode::Unit => "F1 (0-1)",
        ReportMode::Pct => "F1",
    };
    let _ = writeln!(
        out,
        "{:<9} {:>7} {:>8} {:>8} {:>9} {:>8} {:>8}",
        "Modality", "Window", "Top-1", "Top-3", f1_head, "AUC", "Trials"
    );
    let mut last: Option<&str> = None;
    for r in &table.rows {
        let name = if last == Some(r.modality.as_str()) { "" } else { r.modality.as_str() };
        last = Some(r.modality.as_str());
        let f1 = match table.mode {
            ReportMode::Unit => format!("{:.4}", r.f1),
            ReportMode::Pct => format!("{:.2}", r.f1),
        };
        let _ = writeln!(
            out,
            "{:<9} {:>7} {:>8.2} {:>8.2} {:>9} {:>8.2} {:>8}",
            name,
            format!("{} ms", r.window_ms),
            r.top1,
            r.top3,
            f1,
            r.auc,
            r.n_trials
        );
    }
    out
}

fn render_csv(table: &ReportTable) -> String {
    let mut out = String::from("modality,window_ms,top1,top3,f1,auc,n_trials\n");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.modality, r.window_ms, r.top1, r.top3, r.f1, r.auc, r.n_trials
        );
    }
    out
}

impl RenderedReport {
    /// Writes `<stem>.txt`, `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        for (ext, body) in [("txt", &self.text), ("json", &self.json), ("csv", &self.csv)] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, body).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(c: usize) -> Vec<f32> {
        let mut v = vec![0.0; N_CLASSES];
        v[c] = 1.0;
        v
    }

    #[test]
    fn topk_hand_case() {
        let logits = vec![one_hot(2), one_hot(5), one_hot(0)];
        let top1 = topk_accuracy(&logits, &[2, 5, 9], 1).unwrap();
        assert!((top1 - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(topk_accuracy(&logits, &[2, 5, 9], 15).unwrap(), 100.0);
    }

    #[test]
    fn f1_binary_embedded_toy() {
        let f = macro_f1(&[1, 2, 2, 2], &[1, 1, 2, 2]).unwrap();
        assert!((f.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((f.per_class[2].f1 - 0.8).abs() < 1e-12);
        assert!((f.macro_present - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert!((f.macro_all - (2.0 / 3.0 + 0.8) / 15.0).abs() < 1e-12);
        assert_eq!(f.absent.len(), 13);
    }

    #[test]
    fn auc_small_case() {
        // pairs won: 0.9 > 0.5, 0.9 > 0.1, 0.4 > 0.1; lost: 0.4 < 0.5
        assert_eq!(binary_auc(&[0.9, 0.4], &[0.5, 0.1]), Some(0.75));
        assert_eq!(binary_auc(&[0.9, 0.6], &[0.5, 0.1]), Some(1.0));
        assert_eq!(binary_auc(&[0.5], &[0.5]), Some(0.5));
        assert_eq!(binary_auc(&[], &[0.5]), None);
    }

    #[test]
    fn confusion_rows_are_support() {
        let m = confusion_matrix(&[0, 1, 1], &[0, 0, 1]).unwrap();
        assert_eq!(m[0].iter().sum::<u64>(), 2);
        assert_eq!(m[0][1], 1);
        assert!(confusion_matrix(&[15], &[0]).is_err());
    }

    #[test]
    fn empty_report_renders_header_only() {
        let r = render_report(&[], ReportMode::Pct).unwrap();
        assert!(r.table.rows.is_empty());
        assert_eq!(r.text.lines().count(), 1);
        assert_eq!(r.csv.lines().count(), 1);
    }
}
