//! Phoneme-locked epochs at a fixed window length, sentence-level splits and
//! the on-disk trial store.
//!
//! Each phoneme interval becomes one trial. Its samples are time-resampled to
//! exactly `window_ms * fs / 1000` points, so every trial keeps the whole
//! phoneme regardless of its spoken duration.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{VisemeClass, VisemeInterval};
use crate::signal_io::{ChannelRole, Recording};

pub const FORMAT_VERSION: u32 = 1;
pub const WINDOWS_MS: [u32; 3] = [64, 128, 256];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("interval {index} ({xmin}s..{xmax}s) lies outside the {duration}s recording")]
    Bounds {
        index: usize,
        xmin: f64,
        xmax: f64,
        duration: f64,
    },
    #[error("dataset domain error: {0}")]
    Domain(String),
    #[error("dataset integrity error: {0}")]
    Integrity(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    EegOnly,
    EegEmg,
}

impl Modality {
    pub fn includes(self, role: ChannelRole) -> bool {
        match (self, role) {
            (_, ChannelRole::Reference) => false,
            (_, ChannelRole::Eeg) => true,
            (Modality::EegEmg, ChannelRole::Emg) => true,
            (Modality::EegOnly, ChannelRole::Emg) => false,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Modality::EegOnly => "EEG",
            Modality::EegEmg => "EEG+EMG",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Modality::EegOnly => "eeg",
            Modality::EegEmg => "eeg_emg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    /// Linear-interpolation resampling of the whole interval.
    #[default]
    Resample,
    /// Centre crop or symmetric zero pad.
    CropPad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-trial, per-channel mean 0 / variance 1.
    #[default]
    ZScore,
    /// Raw µV.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpochOptions {
    pub length_mode: LengthMode,
    pub normalization: Normalization,
}

pub fn window_len(window_ms: u32, fs: f64) -> Result<usize> {
    let exact = window_ms as f64 * fs / 1000.0;
    let len = exact.round();
    if len < 2.0 || (exact - len).abs() > 1e-9 {
        return Err(DatasetError::Domain(format!(
            "{window_ms} ms at {fs} Hz is not a whole number of samples (>= 2)"
        )));
    }
    Ok(len as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub label: VisemeClass,
    pub sentence_id: u32,
    pub interval_index: u32,
    pub source_span: (f64, f64),
}

/// One fixed-length multichannel window (channels x len, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrial {
    pub data: Vec<f32>,
    pub n_channels: usize,
    pub len: usize,
    pub window_ms: u32,
    pub meta: TrialMeta,
}

impl LabeledTrial {
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn label(&self) -> VisemeClass {
        self.meta.label
    }
}

/// Linear interpolation onto `len` points with both endpoints aligned.
pub fn resample_linear(x: &[f64], len: usize) -> Vec<f64> {
    let n = x.len();
    if n == len {
        return x.to_vec();
    }
    if len == 1 {
        return vec![x[0]];
    }
    let step = (n - 1) as f64 / (len - 1) as f64;
    (0..len)
        .map(|j| {
            let pos = j as f64 * step;
            let i = (pos.floor() as usize).min(n - 2);
            let frac = pos - i as f64;
            x[i] + (x[i + 1] - x[i]) * frac
        })
        .collect()
}

fn crop_pad(x: &[f64], len: usize) -> Vec<f64> {
    let n = x.len();
    if n >= len {
        let start = (n - len) / 2;
        x[start..start + len].to_vec()
    } else {
        let left = (len - n) / 2;
        let mut out = vec![0.0; len];
        out[left..left + n].copy_from_slice(x);
        out
    }
}

fn zscore(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in x.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochResult {
    pub trials: Vec<LabeledTrial>,
    /// Intervals shorter than two samples.
    pub skipped: usize,
}

/// Cuts one trial per viseme interval out of a preprocessed recording.
pub fn extract_epochs(
    rec: &Recording,
    intervals: &[VisemeInterval],
    sentence_id: u32,
    window_ms: u32,
    modality: Modality,
    opts: EpochOptions,
) -> Result<EpochResult> {
    let fs = rec.fs();
    let len = window_len(window_ms, fs)?;
    let channels: Vec<usize> = rec
        .channels()
        .iter()
        .filter(|c| modality.includes(c.role))
        .map(|c| c.index)
        .collect();
    if channels.is_empty() {
        return Err(DatasetError::Domain(format!("no channels selected for {modality:?}")));
    }
    let n = rec.n_samples();
    let mut out = EpochResult::default();
    for (index, iv) in intervals.iter().enumerate() {
        let start = (iv.xmin * fs).round();
        let end = (iv.xmax * fs).round();
        if start < 0.0 || end > n as f64 || !(iv.xmin < iv.xmax) {
            return Err(DatasetError::Bounds {
                index,
                xmin: iv.xmin,
                xmax: iv.xmax,
                duration: rec.duration_s(),
            });
        }
        let (start, end) = (start as usize, end as usize);
        if end < start + 2 {
            out.skipped += 1;
            continue;
        }
        let mut data = Vec::with_capacity(channels.len() * len);
        for &c in &channels {
            let slice = &rec.channel(c)[start..end];
            let mut row = match opts.length_mode {
                LengthMode::Resample => resample_linear(slice, len),
                LengthMode::CropPad => crop_pad(slice, len),
            };
            if opts.normalization == Normalization::ZScore {
                zscore(&mut row);
            }
            data.extend(row.iter().map(|&v| v as f32));
        }
        out.trials.push(LabeledTrial {
            data,
            n_channels: channels.len(),
            len,
            window_ms,
            meta: TrialMeta {
                label: iv.class,
                sentence_id,
                interval_index: index as u32,
                source_span: (iv.xmin, iv.xmax),
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

/// Sentence-level partition: `n_test` sentence ids drawn by a seeded shuffle.
pub fn split_sentences(sentence_ids: &BTreeSet<u32>, n_test: usize, seed: u64) -> Result<Split> {
    if n_test > 0 && n_test >= sentence_ids.len() {
        return Err(DatasetError::Domain(format!(
            "cannot hold out {n_test} of {} sentences",
            sentence_ids.len()
        )));
    }
    let mut ids: Vec<u32> = sentence_ids.iter().copied().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test: Vec<u32> = ids[..n_test].to_vec();
    let mut train: Vec<u32> = ids[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(Split { train, test })
}

pub fn split_by_sentence(
    trials: Vec<LabeledTrial>,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<LabeledTrial>, Vec<LabeledTrial>, Split)> {
    let ids: BTreeSet<u32> = trials.iter().map(|t| t.meta.sentence_id).collect();
    let split = split_sentences(&ids, n_test, seed)?;
    let test_ids: BTreeSet<u32> = split.test.iter().copied().collect();
    let (test, train): (Vec<_>, Vec<_>) = trials
        .into_iter()
        .partition(|t| test_ids.contains(&t.meta.sentence_id));
    Ok((train, test, split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub fs: f64,
    pub window_ms: u32,
    pub n_channels: usize,
    pub n_samples: usize,
    pub channel_names: Vec<String>,
    pub channel_roles: Vec<ChannelRole>,
    pub modality: Modality,
    pub options: EpochOptions,
    pub n_trials: usize,
    pub split: Split,
    pub seed: u64,
    pub trials: Vec<TrialMeta>,
}

/// Trials plus the manifest describing them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trials: Vec<LabeledTrial>,
}

const TRIALS_FILE: &str = "trials.bin";
const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.format_version != FORMAT_VERSION {
            return Err(DatasetError::Integrity(format!(
                "format version {} (expected {FORMAT_VERSION})",
                m.format_version
            )));
        }
        if m.n_trials != self.trials.len() || m.trials.len() != self.trials.len() {
            return Err(DatasetError::Integrity(format!(
                "manifest declares {} trials, store holds {}",
                m.n_trials,
                self.trials.len()
            )));
        }
        if m.channel_names.len() != m.n_channels || m.channel_roles.len() != m.n_channels {
            return Err(DatasetError::Integrity("channel list length mismatch".into()));
        }
        let train: BTreeSet<u32> = m.split.train.iter().copied().collect();
        if m.split.test.iter().any(|id| train.contains(id)) {
            return Err(DatasetError::Integrity("sentence in both train and test".into()));
        }
        let expected_len = window_len(m.window_ms, m.fs)?;
        if m.n_samples != expected_len {
            return Err(DatasetError::Integrity(format!(
                "window {} ms at {} Hz needs {expected_len} samples, manifest says {}",
                m.window_ms, m.fs, m.n_samples
            )));
        }
        for (i, t) in self.trials.iter().enumerate() {
            if t.len != m.n_samples || t.n_channels != m.n_channels || t.window_ms != m.window_ms {
                return Err(DatasetError::Integrity(format!("trial {i} shape disagrees with manifest")));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(DatasetError::Integrity(format!("trial {i} has non-finite samples")));
            }
        }
        Ok(())
    }

    pub fn train(&self) -> Vec<&LabeledTrial> {
        self.subset(&self.manifest.split.train)
    }

    pub fn test(&self) -> Vec<&LabeledTrial> {
        self.subset(&self.manifest.split.test)
    }

    fn subset(&self, ids: &[u32]) -> Vec<&LabeledTrial> {
        let ids: BTreeSet<u32> = ids.iter().copied().collect();
        self.trials
            .iter()
            .filter(|t| ids.contains(&t.meta.sentence_id))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let dir = dir.as_ref();
        let io = |p: &Path, e| DatasetError::Io {
            path: p.display().to_string(),
            source: e,
        };
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut blob = Vec::with_capacity(self.trials.len() * self.manifest.n_channels * self.manifest.n_samples * 4);
        for t in &self.trials {
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin = dir.join(TRIALS_FILE);
        fs::write(&bin, blob).map_err(|e| io(&bin, e))?;
        let man = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&man, json).map_err(|e| io(&man, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let io = |p: &Path, e| DatasetError::Io {
            path: p.display().to_string(),
            source: e,
        };
        let man = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&man).map_err(|e| io(&man, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DatasetError::Integrity(format!("{}: {e}", man.display())))?;
        let bin = dir.join(TRIALS_FILE);
        let blob = fs::read(&bin).map_err(|e| io(&bin, e))?;
        let per_trial = manifest.n_channels * manifest.n_samples;
        if blob.len() != manifest.n_trials * per_trial * 4 || manifest.trials.len() != manifest.n_trials {
            return Err(DatasetError::Integrity(format!(
                "{} holds {} bytes, manifest declares {} trials of {} x {} samples",
                bin.display(),
                blob.len(),
                manifest.n_trials,
                manifest.n_channels,
                manifest.n_samples
            )));
        }
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let trials = manifest
            .trials
            .iter()
            .enumerate()
            .map(|(i, meta)| LabeledTrial {
                data: values[i * per_trial..(i + 1) * per_trial].to_vec(),
                n_channels: manifest.n_channels,
                len: manifest.n_samples,
                window_ms: manifest.window_ms,
                meta: meta.clone(),
            })
            .collect();
        let ds = Dataset { manifest, trials };
        ds.validate()?;
        Ok(ds)
    }
}

/// Convenience constructor keeping manifest counts in sync with the trials.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    trials: Vec<LabeledTrial>,
    rec_layout: &Recording,
    fs: f64,
    window_ms: u32,
    modality: Modality,
    options: EpochOptions,
    split: Split,
    seed: u64,
) -> Result<Dataset> {
    let selected: Vec<_> = rec_layout
        .channels()
        .iter()
        .filter(|c| modality.includes(c.role))
        .collect();
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        fs,
        window_ms,
        n_channels: selected.len(),
        n_samples: window_len(window_ms, fs)?,
        channel_names: selected.iter().map(|c| c.name.clone()).collect(),
        channel_roles: selected.iter().map(|c| c.role).collect(),
        modality,
        options,
        n_trials: trials.len(),
        split,
        seed,
        trials: trials.iter().map(|t| t.meta.clone()).collect(),
    };
    let ds = Dataset { manifest, trials };
    ds.validate()?;
    Ok(ds)
}

pub fn label_histogram(trials: &[&LabeledTrial]) -> [usize; VisemeClass::COUNT] {
    let mut h = [0; VisemeClass::COUNT];
    for t in trials {
        h[t.label().index()] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_io::ChannelMeta;

    fn rec(n: usize, roles: &[ChannelRole], f: impl Fn(usize, usize) -> f64) -> Recording {
        let channels = roles
            .iter()
            .enumerate()
            .map(|(i, &role)| ChannelMeta {
                name: format!("C{i}"),
                role,
                resolution: 1.0,
                index: i,
            })
            .collect();
        let data = (0..roles.len()).map(|c| (0..n).map(|s| f(c, s)).collect()).collect();
        Recording::new(channels, 1000.0, data).unwrap()
    }

    const RAW: EpochOptions = EpochOptions {
        length_mode: LengthMode::Resample,
        normalization: Normalization::None,
    };

    fn iv(a: f64, b: f64, c: u8) -> VisemeInterval {
        VisemeInterval {
            xmin: a,
            xmax: b,
            class: VisemeClass::new(c).unwrap(),
        }
    }

    #[test]
    fn exact_window_is_identity() {
        let r = rec(1000, &[ChannelRole::Eeg; 2], |c, s| (c * 1000 + s) as f64 * 0.5);
        let out = extract_epochs(&r, &[iv(0.2, 0.328, 3)], 0, 128, Modality::EegOnly, RAW).unwrap();
        let t = &out.trials[0];
        assert_eq!(t.len, 128);
        for c in 0..2 {
            let expect: Vec<f32> = (200..328).map(|s| ((c * 1000 + s) as f64 * 0.5) as f32).collect();
            assert_eq!(t.channel(c), &expect[..]);
        }
    }

    #[test]
    fn ramp_resamples_to_ramp() {
        let r = rec(1000, &[ChannelRole::Eeg], |_, s| 3.0 * s as f64 - 7.0);
        for w in WINDOWS_MS {
            let out = extract_epochs(&r, &[iv(0.1, 0.19, 1)], 0, w, Modality::EegOnly, RAW).unwrap();
            let t = &out.trials[0];
            assert_eq!(t.len, w as usize);
            let y = t.channel(0);
            let slope = (y[1] - y[0]) as f64;
            for k in 1..y.len() {
                assert!(((y[k] - y[k - 1]) as f64 - slope).abs() < 1e-3);
            }
            assert!((y[0] as f64 - (3.0 * 100.0 - 7.0)).abs() < 1e-3);
            assert!((y[y.len() - 1] as f64 - (3.0 * 189.0 - 7.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn modality_channel_selection() {
        let roles = [ChannelRole::Eeg, ChannelRole::Eeg, ChannelRole::Reference, ChannelRole::Emg];
        let r = rec(500, &roles, |c, _| c as f64);
        let e = extract_epochs(&r, &[iv(0.0, 0.1, 0)], 0, 64, Modality::EegOnly, RAW).unwrap();
        assert_eq!(e.trials[0].n_channels, 2);
        let both = extract_epochs(&r, &[iv(0.0, 0.1, 0)], 0, 64, Modality::EegEmg, RAW).unwrap();
        assert_eq!(both.trials[0].n_channels, 3);
        assert!(both.trials[0].channel(2).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn out_of_bounds_and_short_intervals() {
        let r = rec(500, &[ChannelRole::Eeg], |_, s| s as f64);
        assert!(matches!(
            extract_epochs(&r, &[iv(0.4, 0.6, 1)], 0, 64, Modality::EegOnly, RAW),
            Err(DatasetError::Bounds { .. })
        ));
        let out = extract_epochs(&r, &[iv(0.1, 0.1005, 1), iv(0.2, 0.3, 2)], 0, 64, Modality::EegOnly, RAW).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.trials[0].meta.interval_index, 1);
    }

    #[test]
    fn zscore_rows() {
        let r = rec(500, &[ChannelRole::Eeg], |_, s| (s as f64 * 0.3).sin() * 40.0 + 12.0);
        let out = extract_epochs(&r, &[iv(0.0, 0.2, 1)], 0, 128, Modality::EegOnly, EpochOptions::default()).unwrap();
        let y: Vec<f64> = out.trials[0].channel(0).iter().map(|&v| v as f64).collect();
        let mean = y.iter().sum::<f64>() / 128.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 128.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn crop_pad_mode() {
        assert_eq!(crop_pad(&[1.0, 2.0, 3.0, 4.0, 5.0], 3), vec![2.0, 3.0, 4.0]);
        assert_eq!(crop_pad(&[1.0, 2.0], 4), vec![0.0, 1.0, 2.0, 0.0]);
    }

    fn trials_for(sentences: u32) -> Vec<LabeledTrial> {
        (0..sentences)
            .flat_map(|s| {
                (0..3).map(move |i| LabeledTrial {
                    data: vec![s as f32; 4],
                    n_channels: 1,
                    len: 4,
                    window_ms: 4,
                    meta: TrialMeta {
                        label: VisemeClass::new((i % 15) as u8).unwrap(),
                        sentence_id: s,
                        interval_index: i,
                        source_span: (0.0, 0.1),
                    },
                })
            })
            .collect()
    }

    #[test]
    fn split_partition_shapes() {
        let (train, test, split) = split_by_sentence(trials_for(474), 50, 7).unwrap();
        assert_eq!(split.train.len(), 424);
        assert_eq!(split.test.len(), 50);
        assert_eq!(train.len(), 424 * 3);
        assert_eq!(test.len(), 150);
        let test_ids: BTreeSet<u32> = test.iter().map(|t| t.meta.sentence_id).collect();
        assert!(train.iter().all(|t| !test_ids.contains(&t.meta.sentence_id)));
        let (_, _, again) = split_by_sentence(trials_for(474), 50, 7).unwrap();
        assert_eq!(split, again);
        let (train, test, _) = split_by_sentence(trials_for(5), 0, 1).unwrap();
        assert_eq!((train.len(), test.len()), (15, 0));
        assert!(split_by_sentence(trials_for(5), 5, 1).is_err());
    }
}
