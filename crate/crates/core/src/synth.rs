//! Synthetic corpus with known ground truth: random phoneme sentences, their
//! alignments, and multichannel recordings carrying a viseme-specific
//! signature over pink background noise and mains interference.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{
    phoneme_to_viseme, write_textgrid, AlignmentError, PhonemeInterval, PhonemeTier, VisemeClass, VisemeMap,
    ARPABET, SILENCE,
};
use crate::parallel;
use crate::reconstruct::{CatalogEntry, ReconstructError, SentenceCatalog};
use crate::signal_io::{write_brainvision, ChannelMeta, ChannelRole, Marker, MarkerList, Recording, SignalIoError};

pub const CATALOG_FILE: &str = "catalog.json";
pub const CONFIG_FILE: &str = "synth_config.json";
pub const TIER_NAME: &str = "phones";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synth config error: {0}")]
    Config(String),
    #[error(transparent)]
    Signal(#[from] SignalIoError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Catalog(#[from] ReconstructError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_sentences: usize,
    /// Inclusive range, counting the two boundary silences.
    pub phonemes_per_sentence: (usize, usize),
    /// Inclusive per-phoneme duration range in milliseconds.
    pub duration_ms: (f64, f64),
    pub fs: f64,
    /// EEG channels, the last of which is the reference.
    pub n_eeg: usize,
    pub n_emg: usize,
    pub snr_db: f64,
    pub line_noise_amp: f64,
    pub line_freq: f64,
    pub emg_gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sentences: 474,
            phonemes_per_sentence: (26, 40),
            duration_ms: (50.0, 200.0),
            fs: 1000.0,
            n_eeg: 16,
            n_emg: 4,
            snr_db: 20.0,
            line_noise_amp: 2.0,
            line_freq: 60.0,
            emg_gain: 3.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if !(self.fs > 998.0 && self.fs.is_finite()) {
            return bad(format!("fs {} must exceed 998 Hz", self.fs));
        }
        if self.n_eeg < 2 {
            return bad("need at least one EEG channel besides the reference".into());
        }
        let (lo, hi) = self.phonemes_per_sentence;
        if lo < 3 || lo > hi {
            return bad(format!("phoneme range ({lo}, {hi}) must satisfy 3 <= lo <= hi"));
        }
        let (a, b) = self.duration_samples();
        if a < 2 || a > b {
            return bad(format!("duration range {:?} ms is empty at {} Hz", self.duration_ms, self.fs));
        }
        if !self.snr_db.is_finite() || !(self.line_noise_amp >= 0.0) || !(self.emg_gain >= 0.0) {
            return bad("snr_db, line_noise_amp and emg_gain must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn n_channels(&self) -> usize {
        self.n_eeg + self.n_emg
    }

    /// Inclusive duration bounds in whole samples.
    pub fn duration_samples(&self) -> (usize, usize) {
        let lo = (self.duration_ms.0 * self.fs / 1000.0 - 1e-9).ceil().max(0.0) as usize;
        let hi = (self.duration_ms.1 * self.fs / 1000.0 + 1e-9).floor().max(0.0) as usize;
        (lo, hi)
    }

    /// Peak amplitude of each signature sinusoid.
    pub fn signature_amplitude(&self) -> f64 {
        // two unit sinusoids carry power 1, matched against unit-variance noise
        10f64.powf(self.snr_db / 20.0)
    }

    pub fn channels(&self) -> Vec<ChannelMeta> {
        (0..self.n_channels())
            .map(|i| {
                let (name, role) = if i + 1 < self.n_eeg {
                    (format!("EEG{:02}", i + 1), ChannelRole::Eeg)
                } else if i + 1 == self.n_eeg {
                    ("REF".to_string(), ChannelRole::Reference)
                } else {
                    (format!("EMG{:02}", i + 1 - self.n_eeg), ChannelRole::Emg)
                };
                ChannelMeta { name, role, resolution: 1.0, index: i }
            })
            .collect()
    }
}

/// Signature frequencies of a class; silence has none.
pub fn signature_freqs(class: VisemeClass) -> Option<(f64, f64)> {
    let c = class.id() as f64;
    (class != VisemeClass::SILENCE).then(|| (35.0 + 12.0 * c, 41.0 + 13.0 * c))
}

/// Per-class spatial mixing vectors, one gain per channel, N(0, 1).
pub fn mixing_vectors(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    (0..VisemeClass::COUNT)
        .map(|_| (0..cfg.n_channels()).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSentence {
    pub id: u32,
    pub phonemes: Vec<String>,
    /// Samples per phoneme.
    pub durations: Vec<usize>,
}

impl SynthSentence {
    pub fn n_samples(&self) -> usize {
        self.durations.iter().sum()
    }

    pub fn text(&self) -> String {
        self.phonemes.join(" ")
    }

    pub fn tier(&self, fs: f64) -> Result<PhonemeTier> {
        let mut start = 0;
        let mut intervals = Vec::with_capacity(self.phonemes.len());
        for (p, &d) in self.phonemes.iter().zip(&self.durations) {
            intervals.push(PhonemeInterval::new(start as f64 / fs, (start + d) as f64 / fs, p)?);
            start += d;
        }
        Ok(PhonemeTier::new(TIER_NAME, 0.0, start as f64 / fs, intervals)?)
    }

    pub fn visemes(&self, map: &VisemeMap) -> Result<Vec<VisemeClass>> {
        Ok(self
            .phonemes
            .iter()
            .map(|p| phoneme_to_viseme(p, map))
            .collect::<std::result::Result<_, _>>()?)
    }

    /// Sample spans `[start, end)` per phoneme.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut start = 0;
        self.durations
            .iter()
            .map(|&d| {
                let s = (start, start + d);
                start += d;
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub sentences: Vec<SynthSentence>,
}

impl SynthCorpus {
    pub fn catalog(&self, map: &VisemeMap) -> Result<SentenceCatalog> {
        let entries = self
            .sentences
            .iter()
            .map(|s| {
                Ok(CatalogEntry {
                    id: s.id,
                    text: s.text(),
                    viseme_sequence: s.visemes(map)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SentenceCatalog::new(entries)?)
    }
}

fn sentence_rng(cfg: &SynthConfig, id: u32, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(((id as u64) << 2) | purpose);
    rng
}

pub fn gen_sentence(cfg: &SynthConfig, id: u32) -> SynthSentence {
    let mut rng = sentence_rng(cfg, id, 0);
    let (lo, hi) = cfg.phonemes_per_sentence;
    let n = rng.random_range(lo..=hi);
    let (dlo, dhi) = cfg.duration_samples();
    let phonemes: Vec<String> = (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                SILENCE.to_string()
            } else {
                ARPABET[rng.random_range(0..ARPABET.len())].to_string()
            }
        })
        .collect();
    let durations = (0..n).map(|_| rng.random_range(dlo..=dhi)).collect();
    SynthSentence { id, phonemes, durations }
}

pub fn gen_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let sentences = parallel::map_indexed(cfg.n_sentences, |i| gen_sentence(cfg, i as u32 + 1));
    Ok(SynthCorpus { config: cfg.clone(), sentences })
}

/// Unit-variance 1/f noise (Kellet's three-pole approximation), normalized per call.
pub fn pink_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    let warmup = 2000;
    let mut out = Vec::with_capacity(n);
    for i in 0..n + warmup {
        let w: f64 = rng.sample(StandardNormal);
        b0 = 0.99765 * b0 + w * 0.0990460;
        b1 = 0.96300 * b1 + w * 0.2965164;
        b2 = 0.57000 * b2 + w * 1.0526913;
        if i >= warmup {
            out.push(b0 + b1 + b2 + w * 0.1848);
        }
    }
    if n > 1 {
        let mean = out.iter().sum::<f64>() / n as f64;
        let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        out.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    out
}

pub fn render_recording(sentence: &SynthSentence, cfg: &SynthConfig, map: &VisemeMap) -> Result<Recording> {
    cfg.validate()?;
    let mixing = mixing_vectors(cfg);
    render_with(sentence, cfg, map, &mixing)
}

fn render_with(sentence: &SynthSentence, cfg: &SynthConfig, map: &VisemeMap, mixing: &[Vec<f64>]) -> Result<Recording> {
    let n = sentence.n_samples();
    let channels = cfg.channels();
    let classes = sentence.visemes(map)?;
    let spans = sentence.spans();
    let amp = cfg.signature_amplitude();
    let mut rng = sentence_rng(cfg, sentence.id, 1);
    let line_phase = rng.random_range(0.0..2.0 * PI);
    let mut data = Vec::with_capacity(channels.len());
    for ch in &channels {
        let mut x = pink_noise(n, &mut rng);
        let gain = match ch.role {
            ChannelRole::Eeg => 1.0,
            ChannelRole::Emg => cfg.emg_gain,
            ChannelRole::Reference => 0.0,
        };
        for (k, v) in x.iter_mut().enumerate() {
            *v += cfg.line_noise_amp * (2.0 * PI * cfg.line_freq * k as f64 / cfg.fs + line_phase).sin();
        }
        if gain > 0.0 {
            for (&class, &(s, e)) in classes.iter().zip(&spans) {
                let Some((f1, f2)) = signature_freqs(class) else { continue };
                let a = amp * gain * mixing[class.index()][ch.index];
                for (k, v) in x.iter_mut().enumerate().take(e).skip(s) {
                    let t = k as f64 / cfg.fs;
                    *v += a * ((2.0 * PI * f1 * t).sin() + (2.0 * PI * f2 * t).sin());
                }
            }
        }
        data.push(x);
    }
    Ok(Recording::new(channels, cfg.fs, data)?)
}

pub fn recording_base(out_dir: &Path, id: u32) -> PathBuf {
    out_dir.join(format!("sentence_{id:03}"))
}

/// Generates the corpus and writes recordings, TextGrids, the catalog and
/// the config into `out_dir`.
pub fn emit(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthCorpus> {
    let out_dir = out_dir.as_ref();
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let corpus = gen_corpus(cfg)?;
    let map = VisemeMap::default();
    let mixing = mixing_vectors(cfg);
    let written = parallel::map_indexed(corpus.sentences.len(), |i| -> Result<()> {
        let s = &corpus.sentences[i];
        let rec = render_with(s, cfg, &map, &mixing)?;
        let base = recording_base(out_dir, s.id);
        let markers = MarkerList {
            entries: vec![Marker {
                kind: "New Segment".into(),
                description: String::new(),
                position: 0,
                length: 1,
                channel: 0,
            }],
        };
        write_brainvision(&rec, &markers, &base)?;
        write_textgrid(&[s.tier(cfg.fs)?], base.with_extension("TextGrid"))?;
        Ok(())
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;
    corpus.catalog(&map)?.save(out_dir.join(CATALOG_FILE))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&cfg_path, text + "\n").map_err(io(&cfg_path))?;
    Ok(corpus)
}

/// `|X(f)|^2 / N` by the Goertzel recursion.
pub fn goertzel_power(x: &[f64], f: f64, fs: f64) -> f64 {
    let coeff = 2.0 * (2.0 * PI * f / fs).cos();
    let (mut s1, mut s2) = (0.0, 0.0);
    for &v in x {
        let s0 = v + coeff * s1 - s2;
        s2 = s1;
        s1 = s0;
    }
    (s1 * s1 + s2 * s2 - coeff * s1 * s2) / x.len() as f64
}

/// Edges of the feature bands in Hz: 30 Hz wide, covering every signature.
pub const FEATURE_BANDS: [(f64, f64); 7] = [
    (30.0, 60.0),
    (60.0, 90.0),
    (90.0, 120.0),
    (120.0, 150.0),
    (150.0, 180.0),
    (180.0, 210.0),
    (210.0, 240.0),
];

/// Band-power features of one interval: per channel, the log of the mean
/// periodogram over the DFT bins falling in each of [`FEATURE_BANDS`].
pub fn band_power_features(rec: &Recording, channels: &[usize], span: (usize, usize)) -> Vec<f64> {
    let fs = rec.fs();
    let n = span.1 - span.0;
    let mut out = Vec::with_capacity(channels.len() * FEATURE_BANDS.len());
    for &c in channels {
        let x = &rec.channel(c)[span.0..span.1];
        let mean = x.iter().sum::<f64>() / n as f64;
        let centered: Vec<f64> = x.iter().map(|v| v - mean).collect();
        for &(lo, hi) in &FEATURE_BANDS {
            let bins: Vec<f64> = (1..n / 2)
                .map(|k| k as f64 * fs / n as f64)
                .filter(|f| (lo..hi).contains(f))
                .collect();
            let p = if bins.is_empty() {
                goertzel_power(&centered, 0.5 * (lo + hi), fs)
            } else {
                bins.iter().map(|&f| goertzel_power(&centered, f, fs)).sum::<f64>() / bins.len() as f64
            };
            out.push((p + 1e-12).ln());
        }
    }
    out
}

/// Fraction of `test` rows assigned to their own class by the nearest
/// (Euclidean) class centroid of `train`.
pub fn nearest_centroid_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)]) -> f64 {
    let dim = train.first().map_or(0, |r| r.0.len());
    let mut sums = vec![vec![0.0; dim]; VisemeClass::COUNT];
    let mut counts = vec![0usize; VisemeClass::COUNT];
    for (f, c) in train {
        counts[*c] += 1;
        for (s, v) in sums[*c].iter_mut().zip(f) {
            *s += v;
        }
    }
    let centroids: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let correct = test
        .iter()
        .filter(|(f, c)| {
            let best = centroids
                .iter()
                .enumerate()
                .filter_map(|(k, cen)| {
                    cen.as_ref().map(|cen| (k, cen.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k);
            best == Some(*c)
        })
        .count();
    if test.is_empty() {
        0.0
    } else {
        correct as f64 / test.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::tone_power;

    fn small(n: usize) -> SynthConfig {
        SynthConfig { n_sentences: n, n_eeg: 4, n_emg: 2, ..SynthConfig::default() }
    }

    #[test]
    fn deterministic_and_bounded() {
        let cfg = small(20);
        let a = gen_corpus(&cfg).unwrap();
        assert_eq!(a, gen_corpus(&cfg).unwrap());
        for s in &a.sentences {
            assert!(s.durations.iter().all(|&d| (50..=200).contains(&d)));
            assert_eq!(s.phonemes.first().unwrap(), "sil");
            assert_eq!(s.phonemes.last().unwrap(), "sil");
            assert!((26..=40).contains(&s.phonemes.len()));
        }
        let other = gen_corpus(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn paper_scale_count() {
        let c = gen_corpus(&SynthConfig { n_sentences: 474, ..SynthConfig::default() }).unwrap();
        assert_eq!(c.sentences.len(), 474);
        assert_eq!(gen_corpus(&small(0)).unwrap().sentences.len(), 0);
    }

    #[test]
    fn frequencies_stay_in_band_and_pairs_distinct() {
        let mut pairs = Vec::new();
        for c in VisemeClass::all().skip(1) {
            let (a, b) = signature_freqs(c).unwrap();
            assert!((35.0..240.0).contains(&a) && (35.0..240.0).contains(&b));
            assert!(a < b);
            pairs.push((a as u32, b as u32));
        }
        let n = pairs.len();
        pairs.sort_unstable();
        pairs.dedup();
        assert_eq!(pairs.len(), n);
        // the two families meet once: 35 + 12*7 = 41 + 13*6
        assert_eq!(signature_freqs(VisemeClass::new(7).unwrap()).unwrap().0, 119.0);
        assert_eq!(signature_freqs(VisemeClass::new(6).unwrap()).unwrap().1, 119.0);
        assert!(signature_freqs(VisemeClass::SILENCE).is_none());
    }

    #[test]
    fn goertzel_matches_direct_dft() {
        let x: Vec<f64> = (0..157).map(|i| ((i * 37) % 19) as f64 - 9.0).collect();
        for f in [47.0, 119.5, 223.0] {
            let a = goertzel_power(&x, f, 1000.0);
            let b = tone_power(&x, f, 1000.0);
            assert!((a - b).abs() < 1e-9 * b.max(1.0));
        }
    }

    #[test]
    fn pink_noise_is_unit_variance_and_low_heavy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = pink_noise(20_000, &mut rng);
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((var - 1.0).abs() < 1e-9);
        let lo = tone_power(&x, 5.0, 1000.0);
        let hi = tone_power(&x, 200.0, 1000.0);
        assert!(lo > 10.0 * hi);
    }

    #[test]
    fn high_snr_interval_peaks_at_signature() {
        let cfg = SynthConfig { snr_db: 40.0, line_noise_amp: 0.0, ..small(3) };
        let corpus = gen_corpus(&cfg).unwrap();
        let map = VisemeMap::default();
        for s in &corpus.sentences {
            let rec = render_recording(s, &cfg, &map).unwrap();
            let classes = s.visemes(&map).unwrap();
            for (class, (a, b)) in classes.iter().zip(s.spans()) {
                let Some((f1, f2)) = signature_freqs(*class) else { continue };
                let x = &rec.channel(0)[a..b];
                let grid: Vec<f64> = (30..=240).map(|f| f as f64).collect();
                let p: Vec<f64> = grid.iter().map(|&f| tone_power(x, f, 1000.0)).collect();
                let peak = grid[p.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0];
                let res = 1000.0 / (b - a) as f64;
                assert!(
                    (peak - f1).abs() <= res || (peak - f2).abs() <= res,
                    "class {class} peak {peak} vs {f1}/{f2} (resolution {res})"
                );
            }
        }
    }

    #[test]
    fn reference_channel_carries_no_signature() {
        let cfg = SynthConfig { snr_db: 40.0, line_noise_amp: 0.0, ..small(1) };
        let corpus = gen_corpus(&cfg).unwrap();
        let rec = render_recording(&corpus.sentences[0], &cfg, &VisemeMap::default()).unwrap();
        let var = |c: usize| rec.channel(c).iter().map(|v| v * v).sum::<f64>() / rec.n_samples() as f64;
        assert!((var(3) - 1.0).abs() < 0.2, "reference variance {}", var(3));
        assert!(var(0) > 100.0 || var(1) > 100.0);
    }
}
