//! BrainVision Core Data Format reader and writer.
//!
//! A recording is a `.vhdr` header, a `.vmrk` marker file and a binary `.eeg`
//! sample file. Only multiplexed `INT_16` and `IEEE_FLOAT_32` data is handled.
//! Channel roles are not part of the format; they live in a `<base>.roles.json`
//! sidecar next to the header.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of trailing EMG channels in the default channel layout.
pub const DEFAULT_EMG_CHANNELS: usize = 10;
/// Total channel count of the full-scale montage: 128 EEG (incl. reference) + 10 EMG.
pub const FULL_SCALE_CHANNELS: usize = 138;

#[derive(Debug, Error)]
pub enum SignalIoError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("invalid recording: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SignalIoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        SignalIoError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn parse(path: &Path, line: usize, msg: impl Into<String>) -> Self {
        SignalIoError::Parse {
            path: path.display().to_string(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SignalIoError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ChannelRole {
    Eeg,
    Emg,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub name: String,
    pub role: ChannelRole,
    /// Physical units (µV) per stored count.
    pub resolution: f64,
    pub index: usize,
}

/// Multichannel recording in physical units (µV).
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    channels: Vec<ChannelMeta>,
    fs: f64,
    data: Vec<Vec<f64>>,
}

impl Recording {
    pub fn new(channels: Vec<ChannelMeta>, fs: f64, data: Vec<Vec<f64>>) -> Result<Self> {
        if channels.is_empty() {
            return Err(SignalIoError::Invalid("recording has no channels".into()));
        }
        if channels.len() != data.len() {
            return Err(SignalIoError::Invalid(format!(
                "{} channel descriptors but {} data rows",
                channels.len(),
                data.len()
            )));
        }
        if !(fs.is_finite() && fs > 0.0) {
            return Err(SignalIoError::Invalid(format!("sampling rate {fs} must be > 0")));
        }
        let n = data[0].len();
        let mut names = HashSet::new();
        let mut references = 0;
        for (i, (ch, row)) in channels.iter().zip(&data).enumerate() {
            if ch.index != i {
                return Err(SignalIoError::Invalid(format!(
                    "channel '{}' has index {} at position {i}",
                    ch.name, ch.index
                )));
            }
            if !names.insert(ch.name.as_str()) {
                return Err(SignalIoError::Invalid(format!("duplicate channel name '{}'", ch.name)));
            }
            if ch.role == ChannelRole::Reference {
                references += 1;
            }
            if !(ch.resolution.is_finite() && ch.resolution > 0.0) {
                return Err(SignalIoError::Invalid(format!(
                    "channel '{}' has non-positive resolution",
                    ch.name
                )));
            }
            if row.len() != n {
                return Err(SignalIoError::Invalid(format!(
                    "channel '{}' has {} samples, expected {n}",
                    ch.name,
                    row.len()
                )));
            }
            if let Some(pos) = row.iter().position(|v| !v.is_finite()) {
                return Err(SignalIoError::Invalid(format!(
                    "channel '{}' sample {pos} is not finite",
                    ch.name
                )));
            }
        }
        if references > 1 {
            return Err(SignalIoError::Invalid(format!(
                "{references} REFERENCE channels, at most one allowed"
            )));
        }
        Ok(Recording { channels, fs, data })
    }

    pub fn channels(&self) -> &[ChannelMeta] {
        &self.channels
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        &self.data[i]
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.data[0].len()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }

    /// Same layout, new sample data.
    pub fn with_data(&self, data: Vec<Vec<f64>>) -> Result<Self> {
        Recording::new(self.channels.clone(), self.fs, data)
    }

    pub fn into_data(self) -> Vec<Vec<f64>> {
        self.data
    }
}

/// Channel layout used when no roles sidecar exists: the first `n - 10`
/// channels are EEG with the last of them the reference, the final 10 are EMG.
/// Recordings with 10 or fewer channels are treated as all-EEG.
pub fn default_roles(n: usize) -> Vec<ChannelRole> {
    if n <= DEFAULT_EMG_CHANNELS {
        return vec![ChannelRole::Eeg; n];
    }
    let n_eeg = n - DEFAULT_EMG_CHANNELS;
    (0..n)
        .map(|i| {
            if i + 1 < n_eeg {
                ChannelRole::Eeg
            } else if i + 1 == n_eeg {
                ChannelRole::Reference
            } else {
                ChannelRole::Emg
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Marker {
    pub kind: String,
    pub description: String,
    /// 0-based sample index (the file stores it 1-based).
    pub position: usize,
    pub length: usize,
    /// 0 means all channels.
    pub channel: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerList {
    pub entries: Vec<Marker>,
}

impl MarkerList {
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        let mut prev = 0;
        for (i, m) in self.entries.iter().enumerate() {
            if m.position < prev {
                return Err(SignalIoError::Invalid(format!("marker {} position decreases", i + 1)));
            }
            if m.position >= n_samples.max(1) {
                return Err(SignalIoError::Invalid(format!(
                    "marker {} position {} beyond {n_samples} samples",
                    i + 1,
                    m.position
                )));
            }
            prev = m.position;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BinaryFormat {
    Int16,
    #[default]
    Float32,
}

impl BinaryFormat {
    fn name(self) -> &'static str {
        match self {
            BinaryFormat::Int16 => "INT_16",
            BinaryFormat::Float32 => "IEEE_FLOAT_32",
        }
    }

    fn bytes(self) -> usize {
        match self {
            BinaryFormat::Int16 => 2,
            BinaryFormat::Float32 => 4,
        }
    }
}

fn roles_path(header: &Path) -> PathBuf {
    header.with_extension("roles.json")
}

fn decode_text(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        // Latin-1 maps each byte to the code point of the same value.
        Err(_) => bytes.iter().map(|&b| b as char).collect(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SignalIoError::io(path, e))
}

fn unescape(s: &str) -> String {
    s.replace("\\1", ",")
}

fn escape(s: &str) -> String {
    s.replace(',', "\\1")
}

/// Sections of an INI-like BrainVision file, each key remembering its line.
struct IniFile {
    sections: BTreeMap<String, Vec<(String, String, usize)>>,
}

impl IniFile {
    fn parse(path: &Path, text: &str, magic: &[&str]) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let first = lines
            .next()
            .map(|(_, l)| l.trim_start_matches('\u{feff}').trim())
            .unwrap_or("");
        if !magic.iter().any(|m| first.starts_with(m)) {
            return Err(SignalIoError::parse(path, 1, "missing BrainVision identification line"));
        }
        let mut sections: BTreeMap<String, Vec<(String, String, usize)>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in lines {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') {
                let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) else {
                    return Err(SignalIoError::parse(path, lineno, "unterminated section header"));
                };
                // Free-text comment section: stop parsing keys.
                if name == "Comment" {
                    break;
                }
                current = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
                continue;
            }
            let Some(section) = &current else {
                return Err(SignalIoError::parse(path, lineno, "key outside of any section"));
            };
            let Some((k, v)) = line.split_once('=') else {
                return Err(SignalIoError::parse(path, lineno, format!("expected key=value, got '{line}'")));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(SignalIoError::parse(path, lineno, "empty key"));
            }
            sections
                .get_mut(section)
                .expect("section inserted on header")
                .push((k.to_string(), v.trim().to_string(), lineno));
        }
        Ok(IniFile { sections })
    }

    fn get(&self, section: &str, key: &str) -> Option<(&str, usize)> {
        self.sections
            .get(section)?
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, l)| (v.as_str(), *l))
    }

    fn require(&self, path: &Path, section: &str, key: &str) -> Result<(&str, usize)> {
        self.get(section, key).ok_or_else(|| {
            SignalIoError::parse(path, 0, format!("missing key '{key}' in [{section}]"))
        })
    }

    fn entries(&self, section: &str) -> &[(String, String, usize)] {
        self.sections.get(section).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn numbered_key(key: &str, prefix: &str) -> Option<usize> {
    key.strip_prefix(prefix)?.parse().ok()
}

/// Reads a recording and its markers from a `.vhdr` header path.
pub fn read_brainvision(header_path: impl AsRef<Path>) -> Result<(Recording, MarkerList)> {
    let header_path = header_path.as_ref();
    let text = decode_text(&read_file(header_path)?);
    let ini = IniFile::parse(
        header_path,
        &text,
        &["Brain Vision Data Exchange Header File", "BrainVision Data Exchange Header File"],
    )?;
    let p = header_path;

    if let Some((fmt, line)) = ini.get("Common Infos", "DataFormat") {
        if fmt != "BINARY" {
            return Err(SignalIoError::Unsupported(format!("DataFormat={fmt} (line {line})")));
        }
    }
    if let Some((orient, line)) = ini.get("Common Infos", "DataOrientation") {
        if orient != "MULTIPLEXED" {
            return Err(SignalIoError::Unsupported(format!("DataOrientation={orient} (line {line})")));
        }
    }
    let (fmt, _) = ini.require(p, "Binary Infos", "BinaryFormat")?;
    let format = match fmt {
        "INT_16" => BinaryFormat::Int16,
        "IEEE_FLOAT_32" => BinaryFormat::Float32,
        other => return Err(SignalIoError::Unsupported(format!("BinaryFormat={other}"))),
    };
    let (data_file, _) = ini.require(p, "Common Infos", "DataFile")?;
    let (n_str, n_line) = ini.require(p, "Common Infos", "NumberOfChannels")?;
    let n_channels: usize = n_str
        .parse()
        .map_err(|_| SignalIoError::parse(p, n_line, format!("bad NumberOfChannels '{n_str}'")))?;
    if n_channels == 0 {
        return Err(SignalIoError::parse(p, n_line, "NumberOfChannels must be positive"));
    }
    let (si_str, si_line) = ini.require(p, "Common Infos", "SamplingInterval")?;
    let interval_us: f64 = si_str
        .parse()
        .map_err(|_| SignalIoError::parse(p, si_line, format!("bad SamplingInterval '{si_str}'")))?;
    if !(interval_us.is_finite() && interval_us > 0.0) {
        return Err(SignalIoError::parse(p, si_line, "SamplingInterval must be positive"));
    }
    let fs = 1e6 / interval_us;
    let declared_points = match ini.get("Common Infos", "DataPoints") {
        Some((v, line)) => Some(
            v.parse::<usize>()
                .map_err(|_| SignalIoError::parse(p, line, format!("bad DataPoints '{v}'")))?,
        ),
        None => None,
    };

    let mut names: Vec<Option<(String, f64)>> = vec![None; n_channels];
    let mut seen = 0;
    for (key, value, line) in ini.entries("Channel Infos") {
        let Some(idx) = numbered_key(key, "Ch") else {
            return Err(SignalIoError::parse(p, *line, format!("unexpected key '{key}'")));
        };
        if idx == 0 || idx > n_channels {
            return Err(SignalIoError::Integrity(format!(
                "channel entry Ch{idx} (line {line}) outside declared {n_channels} channels"
            )));
        }
        let fields: Vec<&str> = value.split(',').collect();
        let name = unescape(fields[0].trim());
        if name.is_empty() {
            return Err(SignalIoError::parse(p, *line, "empty channel name"));
        }
        let resolution = match fields.get(2).map(|s| s.trim()) {
            None | Some("") => 1.0,
            Some(r) => r
                .parse::<f64>()
                .ok()
                .filter(|r| r.is_finite() && *r > 0.0)
                .ok_or_else(|| SignalIoError::parse(p, *line, format!("bad resolution '{r}'")))?,
        };
        if names[idx - 1].replace((name, resolution)).is_some() {
            return Err(SignalIoError::parse(p, *line, format!("duplicate entry Ch{idx}")));
        }
        seen += 1;
    }
    if seen != n_channels {
        return Err(SignalIoError::Integrity(format!(
            "header declares {n_channels} channels but lists {seen}"
        )));
    }

    let dir = header_path.parent().unwrap_or_else(|| Path::new("."));
    let roles = match fs::read(roles_path(header_path)) {
        Ok(bytes) => {
            let map: BTreeMap<String, ChannelRole> = serde_json::from_slice(&bytes).map_err(|e| {
                SignalIoError::parse(&roles_path(header_path), e.line(), e.to_string())
            })?;
            names
                .iter()
                .map(|n| {
                    let name = &n.as_ref().expect("all channels seen").0;
                    map.get(name).copied().ok_or_else(|| {
                        SignalIoError::Integrity(format!("roles sidecar lacks channel '{name}'"))
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => default_roles(n_channels),
        Err(e) => return Err(SignalIoError::io(&roles_path(header_path), e)),
    };

    let channels: Vec<ChannelMeta> = names
        .into_iter()
        .zip(roles)
        .enumerate()
        .map(|(index, (n, role))| {
            let (name, resolution) = n.expect("all channels seen");
            ChannelMeta {
                name,
                role,
                resolution,
                index,
            }
        })
        .collect();

    let data_path = dir.join(data_file);
    let raw = read_file(&data_path)?;
    let frame = n_channels * format.bytes();
    let n_samples = match declared_points {
        Some(points) => {
            if raw.len() != points * frame {
                return Err(SignalIoError::Integrity(format!(
                    "{} holds {} bytes, expected {} ({} channels x {} samples x {} bytes)",
                    data_path.display(),
                    raw.len(),
                    points * frame,
                    n_channels,
                    points,
                    format.bytes()
                )));
            }
            points
        }
        None => {
            if raw.len() % frame != 0 {
                return Err(SignalIoError::Integrity(format!(
                    "{} size {} is not a multiple of {} channels x {} bytes",
                    data_path.display(),
                    raw.len(),
                    n_channels,
                    format.bytes()
                )));
            }
            raw.len() / frame
        }
    };

    let mut data = vec![Vec::with_capacity(n_samples); n_channels];
    match format {
        BinaryFormat::Int16 => {
            for (k, chunk) in raw.chunks_exact(2).enumerate() {
                let c = k % n_channels;
                let v = i16::from_le_bytes([chunk[0], chunk[1]]) as f64;
                data[c].push(v * channels[c].resolution);
            }
        }
        BinaryFormat::Float32 => {
            for (k, chunk) in raw.chunks_exact(4).enumerate() {
                let c = k % n_channels;
                let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
                data[c].push(v * channels[c].resolution);
            }
        }
    }
    let recording = Recording::new(channels, fs, data)?;

    let markers = match ini.get("Common Infos", "MarkerFile") {
        Some((marker_file, _)) if !marker_file.is_empty() => read_markers(&dir.join(marker_file))?,
        _ => MarkerList::default(),
    };
    markers.validate(recording.n_samples())?;
    Ok((recording, markers))
}

fn read_markers(path: &Path) -> Result<MarkerList> {
    let text = decode_text(&read_file(path)?);
    let ini = IniFile::parse(
        path,
        &text,
        &["Brain Vision Data Exchange Marker File", "BrainVision Data Exchange Marker File"],
    )?;
    let mut numbered = Vec::new();
    for (key, value, line) in ini.entries("Marker Infos") {
        let Some(idx) = numbered_key(key, "Mk") else {
            return Err(SignalIoError::parse(path, *line, format!("unexpected key '{key}'")));
        };
        let f: Vec<&str> = value.split(',').collect();
        if f.len() < 5 {
            return Err(SignalIoError::parse(path, *line, "marker needs type,desc,position,length,channel"));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.trim()
                .parse::<usize>()
                .map_err(|_| SignalIoError::parse(path, *line, format!("bad marker {what} '{s}'")))
        };
        let position = num(f[2], "position")?;
        if position == 0 {
            return Err(SignalIoError::parse(path, *line, "marker positions are 1-based"));
        }
        numbered.push((
            idx,
            Marker {
                kind: unescape(f[0]),
                description: unescape(f[1]),
                position: position - 1,
                length: num(f[3], "length")?,
                channel: num(f[4], "channel")?,
            },
        ));
    }
    numbered.sort_by_key(|(i, _)| *i);
    Ok(MarkerList {
        entries: numbered.into_iter().map(|(_, m)| m).collect(),
    })
}

/// Writes `<base>.vhdr`, `<base>.vmrk`, `<base>.eeg` and `<base>.roles.json`
/// as multiplexed IEEE_FLOAT_32.
pub fn write_brainvision(rec: &Recording, markers: &MarkerList, base_path: impl AsRef<Path>) -> Result<()> {
    write_brainvision_as(rec, markers, base_path, BinaryFormat::Float32)
}

pub fn write_brainvision_as(
    rec: &Recording,
    markers: &MarkerList,
    base_path: impl AsRef<Path>,
    format: BinaryFormat,
) -> Result<()> {
    let base = base_path.as_ref();
    // Re-validate: a Recording can only be built valid, but the markers are free-form.
    markers.validate(rec.n_samples())?;
    let stem = base
        .file_name()
        .ok_or_else(|| SignalIoError::Invalid(format!("base path '{}' has no file name", base.display())))?
        .to_string_lossy()
        .to_string();
    let with_ext = |ext: &str| base.with_file_name(format!("{stem}.{ext}"));
    let (vhdr, vmrk, eeg) = (with_ext("vhdr"), with_ext("vmrk"), with_ext("eeg"));

    let mut h = String::new();
    h.push_str("Brain Vision Data Exchange Header File Version 1.0\n");
    h.push_str("; Data written by viseme-core\n\n");
    h.push_str("[Common Infos]\nCodepage=UTF-8\n");
    h.push_str(&format!("DataFile={stem}.eeg\nMarkerFile={stem}.vmrk\n"));
    h.push_str("DataFormat=BINARY\nDataOrientation=MULTIPLEXED\n");
    h.push_str(&format!("NumberOfChannels={}\n", rec.n_channels()));
    h.push_str(&format!("DataPoints={}\n", rec.n_samples()));
    h.push_str("; Sampling interval in microseconds\n");
    h.push_str(&format!("SamplingInterval={}\n\n", 1e6 / rec.fs()));
    h.push_str(&format!("[Binary Infos]\nBinaryFormat={}\n\n", format.name()));
    h.push_str("[Channel Infos]\n; Ch<n>=<Name>,<Reference>,<Resolution>,<Unit>\n");
    for ch in rec.channels() {
        h.push_str(&format!(
            "Ch{}={},,{},µV\n",
            ch.index + 1,
            escape(&ch.name),
            ch.resolution
        ));
    }
    fs::write(&vhdr, h).map_err(|e| SignalIoError::io(&vhdr, e))?;

    let mut m = String::new();
    m.push_str("Brain Vision Data Exchange Marker File, Version 1.0\n\n");
    m.push_str(&format!("[Common Infos]\nCodepage=UTF-8\nDataFile={stem}.eeg\n\n"));
    m.push_str("[Marker Infos]\n; Mk<n>=<Type>,<Description>,<Position>,<Size>,<Channel>\n");
    for (i, mk) in markers.entries.iter().enumerate() {
        m.push_str(&format!(
            "Mk{}={},{},{},{},{}\n",
            i + 1,
            escape(&mk.kind),
            escape(&mk.description),
            mk.position + 1,
            mk.length,
            mk.channel
        ));
    }
    fs::write(&vmrk, m).map_err(|e| SignalIoError::io(&vmrk, e))?;

    let n = rec.n_samples();
    let mut bytes = Vec::with_capacity(n * rec.n_channels() * format.bytes());
    for s in 0..n {
        for (c, ch) in rec.channels().iter().enumerate() {
            let counts = rec.data[c][s] / ch.resolution;
            match format {
                BinaryFormat::Float32 => bytes.extend_from_slice(&(counts as f32).to_le_bytes()),
                BinaryFormat::Int16 => {
                    let q = counts.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
                    bytes.extend_from_slice(&q.to_le_bytes());
                }
            }
        }
    }
    fs::write(&eeg, bytes).map_err(|e| SignalIoError::io(&eeg, e))?;

    let roles: BTreeMap<&str, ChannelRole> =
        rec.channels().iter().map(|c| (c.name.as_str(), c.role)).collect();
    let roles_file = roles_path(&vhdr);
    let json = serde_json::to_string_pretty(&roles).expect("role map serializes");
    fs::write(&roles_file, json).map_err(|e| SignalIoError::io(&roles_file, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(n: usize, resolution: f64) -> Vec<ChannelMeta> {
        default_roles(n)
            .into_iter()
            .enumerate()
            .map(|(index, role)| ChannelMeta {
                name: format!("Ch{index:03}"),
                role,
                resolution,
                index,
            })
            .collect()
    }

    #[test]
    fn int16_round_trip_is_exact_after_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let res = 0.1;
        let data: Vec<Vec<f64>> = (0..4)
            .map(|c| (0..1000).map(|s| ((s * 7 + c * 13) % 2001) as f64 - 1000.0).collect())
            .collect();
        let scaled: Vec<Vec<f64>> = data.iter().map(|r| r.iter().map(|v| v * res).collect()).collect();
        let rec = Recording::new(layout(4, res), 1000.0, scaled).unwrap();
        let base = dir.path().join("int16");
        write_brainvision_as(&rec, &MarkerList::default(), &base, BinaryFormat::Int16).unwrap();
        let (back, _) = read_brainvision(base.with_extension("vhdr")).unwrap();
        assert_eq!(back.n_channels(), 4);
        assert_eq!(back.n_samples(), 1000);
        for c in 0..4 {
            for s in 0..1000 {
                assert_eq!(back.channel(c)[s], data[c][s] * res);
            }
        }
    }

    #[test]
    fn full_montage_defaults_partition_roles() {
        let roles = default_roles(FULL_SCALE_CHANNELS);
        let count = |r| roles.iter().filter(|&&x| x == r).count();
        assert_eq!(count(ChannelRole::Eeg), 127);
        assert_eq!(count(ChannelRole::Reference), 1);
        assert_eq!(count(ChannelRole::Emg), 10);
        assert_eq!(roles[127], ChannelRole::Reference);
    }

    #[test]
    fn default_roles_apply_without_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(layout(FULL_SCALE_CHANNELS, 1.0), 1000.0, vec![vec![0.0; 20]; 138]).unwrap();
        let base = dir.path().join("full");
        write_brainvision(&rec, &MarkerList::default(), &base).unwrap();
        fs::remove_file(dir.path().join("full.roles.json")).unwrap();
        let (back, _) = read_brainvision(dir.path().join("full.vhdr")).unwrap();
        let emg = back.channels().iter().filter(|c| c.role == ChannelRole::Emg).count();
        assert_eq!(emg, 10);
        assert_eq!(back.channels()[127].role, ChannelRole::Reference);
    }

    #[test]
    fn full_scale_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(layout(138, 1.0), 1000.0, vec![vec![1.5; 10_000]; 138]).unwrap();
        let base = dir.path().join("big");
        write_brainvision(&rec, &MarkerList::default(), &base).unwrap();
        let size = fs::metadata(dir.path().join("big.eeg")).unwrap().len();
        // channels * samples * sizeof(f32), counted independently
        let expected: u64 = [138u64, 10_000, 4].iter().product();
        assert_eq!(size, expected);
        assert_eq!(size, 5_520_000);
    }

    #[test]
    fn truncated_data_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(layout(4, 1.0), 1000.0, vec![vec![0.25; 100]; 4]).unwrap();
        let base = dir.path().join("short");
        write_brainvision(&rec, &MarkerList::default(), &base).unwrap();
        let eeg = dir.path().join("short.eeg");
        let bytes = fs::read(&eeg).unwrap();
        fs::write(&eeg, &bytes[..bytes.len() - 16]).unwrap();
        let err = read_brainvision(dir.path().join("short.vhdr")).unwrap_err();
        assert!(matches!(err, SignalIoError::Integrity(_)), "{err}");
    }

    #[test]
    fn zero_channels_rejected() {
        assert!(matches!(
            Recording::new(vec![], 1000.0, vec![]),
            Err(SignalIoError::Invalid(_))
        ));
    }

    #[test]
    fn malformed_header_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vhdr");
        fs::write(
            &p,
            "Brain Vision Data Exchange Header File Version 1.0\n[Common Infos]\nDataFile=x.eeg\nthis is not a key\n",
        )
        .unwrap();
        match read_brainvision(&p).unwrap_err() {
            SignalIoError::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn vectorized_and_unknown_formats_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(layout(2, 1.0), 500.0, vec![vec![0.0; 10]; 2]).unwrap();
        let base = dir.path().join("v");
        write_brainvision(&rec, &MarkerList::default(), &base).unwrap();
        let vhdr = dir.path().join("v.vhdr");
        let text = fs::read_to_string(&vhdr).unwrap();
        fs::write(&vhdr, text.replace("MULTIPLEXED", "VECTORIZED")).unwrap();
        assert!(matches!(read_brainvision(&vhdr), Err(SignalIoError::Unsupported(_))));
        fs::write(&vhdr, text.replace("IEEE_FLOAT_32", "UINT_16")).unwrap();
        assert!(matches!(read_brainvision(&vhdr), Err(SignalIoError::Unsupported(_))));
    }

    #[test]
    fn latin1_header_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(layout(2, 1.0), 1000.0, vec![vec![2.0; 8]; 2]).unwrap();
        let base = dir.path().join("l1");
        write_brainvision(&rec, &MarkerList::default(), &base).unwrap();
        let vhdr = dir.path().join("l1.vhdr");
        let text = fs::read_to_string(&vhdr).unwrap();
        // Re-encode the µ sign as a single Latin-1 byte.
        let bytes: Vec<u8> = text.chars().map(|c| c as u32 as u8).collect();
        fs::write(&vhdr, bytes).unwrap();
        let (back, _) = read_brainvision(&vhdr).unwrap();
        assert_eq!(back.channel(1), &[2.0; 8]);
    }

    #[test]
    fn markers_round_trip_with_escaped_commas() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new(layout(2, 1.0), 1000.0, vec![vec![0.0; 50]; 2]).unwrap();
        let markers = MarkerList {
            entries: vec![
                Marker { kind: "New Segment".into(), description: "".into(), position: 0, length: 1, channel: 0 },
                Marker { kind: "Phoneme".into(), description: "a,b".into(), position: 10, length: 20, channel: 0 },
            ],
        };
        let base = dir.path().join("mk");
        write_brainvision(&rec, &markers, &base).unwrap();
        let (_, back) = read_brainvision(dir.path().join("mk.vhdr")).unwrap();
        assert_eq!(back, markers);
    }

    #[test]
    fn two_references_rejected() {
        let mut chans = layout(3, 1.0);
        chans[0].role = ChannelRole::Reference;
        chans[1].role = ChannelRole::Reference;
        assert!(Recording::new(chans, 1000.0, vec![vec![0.0; 4]; 3]).is_err());
    }
}
