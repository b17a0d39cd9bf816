//! IIR filter design and zero-phase application.
//!
//! Bandpass filters are Butterworth designs mapped to the digital domain by
//! the bilinear transform with prewarped band edges, realized as cascaded
//! second-order sections. Line noise is removed with single-biquad notches.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel;
use crate::signal_io::{ChannelRole, Recording, SignalIoError};

#[derive(Debug, Error)]
pub enum DspError {
    #[error("filter domain error: {0}")]
    Domain(String),
    #[error("input of {len} samples too short for zero-phase filtering (need > {min})")]
    TooShort { len: usize, min: usize },
    #[error(transparent)]
    Recording(#[from] SignalIoError),
}

pub type Result<T> = std::result::Result<T, DspError>;

/// One biquad, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiquadSection {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadSection {
    /// Stability triangle: both poles strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        self.a2 < 1.0 && self.a1.abs() < 1.0 + self.a2
    }

    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    /// DF2T state reached after a long run of constant unit input.
    fn steady_state(&self) -> [f64; 2] {
        let g = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        let s2 = self.b2 - self.a2 * g;
        let s1 = self.b1 - self.a1 * g + s2;
        [s1, s2]
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Bandpass,
    Notch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMeta {
    pub kind: FilterKind,
    pub order: usize,
    pub edges_hz: Vec<f64>,
    pub fs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SosFilter {
    sections: Vec<BiquadSection>,
    overall_gain: f64,
    meta: DesignMeta,
}

impl SosFilter {
    pub fn new(sections: Vec<BiquadSection>, overall_gain: f64, meta: DesignMeta) -> Result<Self> {
        if sections.is_empty() {
            return Err(DspError::Domain("filter needs at least one section".into()));
        }
        if let Some(i) = sections.iter().position(|s| !s.is_stable()) {
            return Err(DspError::Domain(format!("section {i} is unstable: {:?}", sections[i])));
        }
        Ok(SosFilter {
            sections,
            overall_gain,
            meta,
        })
    }

    pub fn sections(&self) -> &[BiquadSection] {
        &self.sections
    }

    pub fn overall_gain(&self) -> f64 {
        self.overall_gain
    }

    pub fn meta(&self) -> &DesignMeta {
        &self.meta
    }

    /// Complex frequency response at `f` Hz.
    pub fn response(&self, f: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f / self.meta.fs);
        self.sections
            .iter()
            .fold(Complex64::new(self.overall_gain, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude(&self, f: f64) -> f64 {
        self.response(f).norm()
    }

    /// Edge padding used by [`filter_zero_phase`].
    pub fn pad_len(&self) -> usize {
        3 * self.sections.len() * 10
    }

    /// Causal single pass, starting from the given per-section states.
    fn run(&self, x: &mut [f64], init: Option<f64>) {
        let mut input_level = init.map(|v| v * self.overall_gain);
        for v in x.iter_mut() {
            *v *= self.overall_gain;
        }
        for s in &self.sections {
            let [mut s1, mut s2] = match input_level {
                Some(level) => {
                    let [a, b] = s.steady_state();
                    [a * level, b * level]
                }
                None => [0.0, 0.0],
            };
            for v in x.iter_mut() {
                let xin = *v;
                let y = s.b0 * xin + s1;
                s1 = s.b1 * xin - s.a1 * y + s2;
                s2 = s.b2 * xin - s.a2 * y;
                *v = y;
            }
            input_level = input_level.map(|l| l * s.dc_gain());
        }
    }

    /// Causal application from rest.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.run(&mut y, None);
        y
    }
}

fn check_edge(f: f64, fs: f64, what: &str) -> Result<()> {
    if !(fs.is_finite() && fs > 0.0) {
        return Err(DspError::Domain(format!("sampling rate {fs} must be positive")));
    }
    if !(f.is_finite() && f > 0.0 && f < fs / 2.0) {
        return Err(DspError::Domain(format!(
            "{what} {f} Hz must lie strictly between 0 and Nyquist {} Hz",
            fs / 2.0
        )));
    }
    Ok(())
}

fn bilinear(s: Complex64, fs2: f64) -> Complex64 {
    (fs2 + s) / (fs2 - s)
}

/// Biquad denominator from a conjugate pole pair or two real poles.
fn denominator(p: Complex64, q: Complex64) -> (f64, f64) {
    let a1 = -(p + q);
    let a2 = p * q;
    (a1.re, a2.re)
}

/// Butterworth bandpass of the given prototype order (digital order `2 * order`).
pub fn design_butter_bandpass(order: usize, f_lo: f64, f_hi: f64, fs: f64) -> Result<SosFilter> {
    if order == 0 {
        return Err(DspError::Domain("order must be >= 1".into()));
    }
    check_edge(f_lo, fs, "low edge")?;
    check_edge(f_hi, fs, "high edge")?;
    if f_lo >= f_hi {
        return Err(DspError::Domain(format!("low edge {f_lo} must be below high edge {f_hi}")));
    }
    let fs2 = 2.0 * fs;
    let w_lo = fs2 * (PI * f_lo / fs).tan();
    let w_hi = fs2 * (PI * f_hi / fs).tan();
    let bw = w_hi - w_lo;
    let w0_sq = w_lo * w_hi;

    // Prototype poles in the upper half plane (plus the real pole for odd order).
    let n = order as f64;
    let mut sections = Vec::with_capacity(order);
    let lp_to_bp = |p: Complex64| -> (Complex64, Complex64) {
        let half = p * (bw / 2.0);
        let root = (half * half - w0_sq).sqrt();
        (half + root, half - root)
    };
    for k in 0..order / 2 {
        let theta = PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n);
        let p = Complex64::from_polar(1.0, theta);
        let (s1, s2) = lp_to_bp(p);
        for s in [s1, s2] {
            let z = bilinear(s, fs2);
            let (a1, a2) = denominator(z, z.conj());
            sections.push(BiquadSection { b0: 1.0, b1: 0.0, b2: -1.0, a1, a2 });
        }
    }
    if order % 2 == 1 {
        let (s1, s2) = lp_to_bp(Complex64::new(-1.0, 0.0));
        let (z1, z2) = (bilinear(s1, fs2), bilinear(s2, fs2));
        let (a1, a2) = denominator(z1, z2);
        sections.push(BiquadSection { b0: 1.0, b1: 0.0, b2: -1.0, a1, a2 });
    }

    let meta = DesignMeta {
        kind: FilterKind::Bandpass,
        order,
        edges_hz: vec![f_lo, f_hi],
        fs,
    };
    let unnormalized = SosFilter::new(sections, 1.0, meta)?;
    // Unit gain at the prewarped geometric center.
    let f_center = fs / PI * (w0_sq.sqrt() / fs2).atan();
    let gain = 1.0 / unnormalized.magnitude(f_center);
    Ok(SosFilter {
        overall_gain: gain,
        ..unnormalized
    })
}

/// Second-order notch with zeros on the unit circle at `f0`.
pub fn design_notch(f0: f64, q: f64, fs: f64) -> Result<SosFilter> {
    check_edge(f0, fs, "notch frequency")?;
    if !(q.is_finite() && q > 0.0) {
        return Err(DspError::Domain(format!("quality factor {q} must be positive")));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let section = BiquadSection {
        b0: 1.0 / a0,
        b1: -2.0 * w0.cos() / a0,
        b2: 1.0 / a0,
        a1: -2.0 * w0.cos() / a0,
        a2: (1.0 - alpha) / a0,
    };
    SosFilter::new(
        vec![section],
        1.0,
        DesignMeta {
            kind: FilterKind::Notch,
            order: 2,
            edges_hz: vec![f0],
            fs,
        },
    )
}

/// Forward-backward filtering with odd-reflection edge padding.
pub fn filter_zero_phase(f: &SosFilter, x: &[f64]) -> Result<Vec<f64>> {
    let pad = f.pad_len();
    if x.len() <= pad {
        return Err(DspError::TooShort { len: x.len(), min: pad });
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let first = ext[0];
    f.run(&mut ext, Some(first));
    ext.reverse();
    let first = ext[0];
    f.run(&mut ext, Some(first));
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessParams {
    pub order: usize,
    pub lo: f64,
    pub hi: f64,
    pub notch_q: f64,
    pub line_freq: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            order: 5,
            lo: 30.0,
            hi: 499.0,
            notch_q: 30.0,
            line_freq: 60.0,
        }
    }
}

impl PreprocessParams {
    /// Line-noise harmonics strictly below both the high edge and Nyquist.
    pub fn harmonics(&self, fs: f64) -> Vec<f64> {
        let limit = self.hi.min(fs / 2.0);
        (1..)
            .map(|k| k as f64 * self.line_freq)
            .take_while(|&f| f < limit)
            .collect()
    }

    pub fn design(&self, fs: f64) -> Result<Vec<SosFilter>> {
        if fs <= 2.0 * self.hi {
            return Err(DspError::Domain(format!(
                "sampling rate {fs} Hz must exceed twice the {} Hz high edge",
                self.hi
            )));
        }
        if !(self.line_freq.is_finite() && self.line_freq > 0.0) {
            return Err(DspError::Domain("line frequency must be positive".into()));
        }
        let mut filters = vec![design_butter_bandpass(self.order, self.lo, self.hi, fs)?];
        for h in self.harmonics(fs) {
            filters.push(design_notch(h, self.notch_q, fs)?);
        }
        Ok(filters)
    }
}

/// Bandpass then line-noise notches, zero-phase, per channel. The reference
/// channel passes through untouched.
pub fn preprocess_recording(rec: &Recording, params: &PreprocessParams) -> Result<Recording> {
    let filters = params.design(rec.fs())?;
    let apply = |c: usize| -> Result<Vec<f64>> {
        if rec.channels()[c].role == ChannelRole::Reference {
            return Ok(rec.channel(c).to_vec());
        }
        let mut y = rec.channel(c).to_vec();
        for f in &filters {
            y = filter_zero_phase(f, &y)?;
        }
        Ok(y)
    };
    let rows = parallel::map_indexed(rec.n_channels(), apply)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(rec.with_data(rows)?)
}

/// Power of the projection of `x` onto a complex exponential at `f` Hz
/// (one periodogram bin at an arbitrary frequency).
pub fn tone_power(x: &[f64], f: f64, fs: f64) -> f64 {
    let w = 2.0 * PI * f / fs;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        let (s, c) = (w * n as f64).sin_cos();
        re += v * c;
        im -= v * s;
    }
    (re * re + im * im) / x.len() as f64
}
