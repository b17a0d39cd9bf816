//! Phoneme alignments (Praat long-form TextGrid) and the 15-class viseme alphabet.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("TextGrid line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid alignment: {0}")]
    Validation(String),
    #[error("unmapped phoneme '{0}'")]
    UnmappedPhoneme(String),
    #[error("invalid viseme map: {0}")]
    InvalidMap(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AlignmentError>;

/// The 39-phoneme ARPAbet inventory used by forced aligners.
pub const ARPABET: [&str; 39] = [
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY", "F", "G", "HH", "IH",
    "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P", "R", "S", "SH", "T", "TH", "UH", "UW",
    "V", "W", "Y", "Z", "ZH",
];

pub const SILENCE: &str = "sil";

/// Strips stress digits, upper-cases, and folds silence markers to `sil`.
pub fn normalize_label(label: &str) -> String {
    let stripped: String = label
        .trim()
        .chars()
        .filter(|c| !matches!(c, '0' | '1' | '2'))
        .collect();
    match stripped.to_ascii_lowercase().as_str() {
        "" | "sil" | "sp" | "spn" => SILENCE.to_string(),
        _ => stripped.to_ascii_uppercase(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeInterval {
    pub xmin: f64,
    pub xmax: f64,
    pub label: String,
}

impl PhonemeInterval {
    pub fn new(xmin: f64, xmax: f64, label: &str) -> Result<Self> {
        if !(xmin.is_finite() && xmax.is_finite() && xmin < xmax) {
            return Err(AlignmentError::Validation(format!(
                "interval '{label}' has xmin {xmin} >= xmax {xmax}"
            )));
        }
        Ok(PhonemeInterval {
            xmin,
            xmax,
            label: normalize_label(label),
        })
    }

    pub fn duration(&self) -> f64 {
        self.xmax - self.xmin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeTier {
    pub name: String,
    pub xmin: f64,
    pub xmax: f64,
    pub intervals: Vec<PhonemeInterval>,
}

const TIME_SLACK: f64 = 1e-9;

impl PhonemeTier {
    pub fn new(name: &str, xmin: f64, xmax: f64, intervals: Vec<PhonemeInterval>) -> Result<Self> {
        let tier = PhonemeTier {
            name: name.to_string(),
            xmin,
            xmax,
            intervals,
        };
        tier.validate()?;
        Ok(tier)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xmin.is_finite() && self.xmax.is_finite() && self.xmin <= self.xmax) {
            return Err(AlignmentError::Validation(format!(
                "tier '{}' span ({}, {}) is invalid",
                self.name, self.xmin, self.xmax
            )));
        }
        let mut prev_end = self.xmin;
        for (i, iv) in self.intervals.iter().enumerate() {
            if !(iv.xmin < iv.xmax) {
                return Err(AlignmentError::Validation(format!(
                    "tier '{}' interval {} has xmax {} <= xmin {}",
                    self.name,
                    i + 1,
                    iv.xmax,
                    iv.xmin
                )));
            }
            if iv.xmin < prev_end - TIME_SLACK {
                return Err(AlignmentError::Validation(format!(
                    "tier '{}' interval {} starts at {} before previous end {}",
                    self.name,
                    i + 1,
                    iv.xmin,
                    prev_end
                )));
            }
            if iv.xmax > self.xmax + TIME_SLACK {
                return Err(AlignmentError::Validation(format!(
                    "tier '{}' interval {} ends past tier end {}",
                    self.name,
                    i + 1,
                    self.xmax
                )));
            }
            prev_end = iv.xmax;
        }
        Ok(())
    }
}

/// Result of parsing: interval tiers plus how many point tiers were skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTextGrid {
    pub tiers: Vec<PhonemeTier>,
    pub skipped_point_tiers: usize,
}

struct Lines<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();
        Lines { lines, pos: 0 }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        let line = self
            .lines
            .get(self.pos)
            .or(self.lines.last())
            .map_or(1, |(n, _)| *n);
        Err(AlignmentError::Parse { line, msg: msg.into() })
    }

    fn next(&mut self) -> Result<&'a str> {
        match self.lines.get(self.pos) {
            Some((_, l)) => {
                self.pos += 1;
                Ok(l)
            }
            None => self.err("unexpected end of file"),
        }
    }

    fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.pos).map(|(_, l)| *l)
    }

    /// Consumes a line of the form `<key> = <value>`.
    fn value(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == key {
                return Ok(v.trim());
            }
        }
        self.pos -= 1;
        self.err(format!("expected '{key} = ...', found '{line}'"))
    }

    fn number(&mut self, key: &str) -> Result<f64> {
        let v = self.value(key)?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => {
                self.pos -= 1;
                self.err(format!("'{key}' is not a number: '{v}'"))
            }
        }
    }

    fn count(&mut self, key: &str) -> Result<usize> {
        let v = self.value(key)?;
        v.parse::<usize>().or_else(|_| {
            self.pos -= 1;
            self.err(format!("'{key}' is not a count: '{v}'"))
        })
    }

    fn string(&mut self, key: &str) -> Result<String> {
        let v = self.value(key)?;
        match unquote(v) {
            Some(s) => Ok(s),
            None => {
                self.pos -= 1;
                self.err(format!("'{key}' is not a quoted string: '{v}'"))
            }
        }
    }

    fn literal(&mut self, expected: &str) -> Result<()> {
        let line = self.next()?;
        if line.replace(' ', "") == expected.replace(' ', "") {
            Ok(())
        } else {
            self.pos -= 1;
            self.err(format!("expected '{expected}', found '{line}'"))
        }
    }
}

fn unquote(v: &str) -> Option<String> {
    let inner = v.strip_prefix('"')?.strip_suffix('"')?;
    // Inside, quotes only appear doubled.
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '"' {
            if chars.next() != Some('"') {
                return None;
            }
        }
        out.push(c);
    }
    Some(out)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn parse_textgrid_str(text: &str) -> Result<ParsedTextGrid> {
    let text = text.trim_start_matches('\u{feff}');
    let mut lines = Lines::new(text);
    if lines.string("File type")? != "ooTextFile" {
        return lines.err("not an ooTextFile");
    }
    if lines.string("Object class")? != "TextGrid" {
        return lines.err("object class is not TextGrid");
    }
    if !lines.peek().is_some_and(|l| l.starts_with("xmin")) {
        return lines.err("short-form TextGrid is not supported; save as long text file");
    }
    lines.number("xmin")?;
    lines.number("xmax")?;
    let exists = lines.next()?;
    if exists.replace(' ', "") != "tiers?<exists>" {
        if exists.replace(' ', "") == "tiers?<absent>" {
            return Ok(ParsedTextGrid {
                tiers: vec![],
                skipped_point_tiers: 0,
            });
        }
        lines.pos -= 1;
        return lines.err("expected 'tiers? <exists>'");
    }
    let size = lines.count("size")?;
    lines.literal("item []:")?;
    let mut tiers = Vec::new();
    let mut skipped = 0;
    for i in 1..=size {
        lines.literal(&format!("item [{i}]:"))?;
        let class = lines.string("class")?;
        let name = lines.string("name")?;
        let xmin = lines.number("xmin")?;
        let xmax = lines.number("xmax")?;
        match class.as_str() {
            "IntervalTier" => {
                let n = lines.count("intervals: size")?;
                let mut intervals = Vec::new();
                for j in 1..=n {
                    lines.literal(&format!("intervals [{j}]:"))?;
                    let a = lines.number("xmin")?;
                    let b = lines.number("xmax")?;
                    let label = lines.string("text")?;
                    if b <= a {
                        return Err(AlignmentError::Validation(format!(
                            "tier '{name}' interval {j}: xmax {b} <= xmin {a}"
                        )));
                    }
                    intervals.push(PhonemeInterval::new(a, b, &label)?);
                }
                tiers.push(PhonemeTier::new(&name, xmin, xmax, intervals)?);
            }
            "TextTier" => {
                let n = lines.count("points: size")?;
                for j in 1..=n {
                    lines.literal(&format!("points [{j}]:"))?;
                    if lines.peek().is_some_and(|l| l.starts_with("time")) {
                        lines.number("time")?;
                    } else {
                        lines.number("number")?;
                    }
                    lines.string("mark")?;
                }
                log::warn!("skipping point tier '{name}'");
                skipped += 1;
            }
            other => return lines.err(format!("unknown tier class '{other}'")),
        }
    }
    Ok(ParsedTextGrid {
        tiers,
        skipped_point_tiers: skipped,
    })
}

pub fn parse_textgrid(path: impl AsRef<Path>) -> Result<Vec<PhonemeTier>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| AlignmentError::Io {
        path: path.display().to_string(),
        source,
    })?;
    // Praat also writes UTF-16; aligners emit UTF-8.
    let text = String::from_utf8(bytes).map_err(|e| AlignmentError::Parse {
        line: 1,
        msg: format!("not UTF-8: {e}"),
    })?;
    Ok(parse_textgrid_str(&text)?.tiers)
}

pub fn textgrid_to_string(tiers: &[PhonemeTier]) -> Result<String> {
    for t in tiers {
        t.validate()?;
    }
    let xmin = tiers.iter().map(|t| t.xmin).fold(f64::INFINITY, f64::min);
    let xmax = tiers.iter().map(|t| t.xmax).fold(f64::NEG_INFINITY, f64::max);
    let (xmin, xmax) = if tiers.is_empty() { (0.0, 0.0) } else { (xmin, xmax) };
    let mut s = String::new();
    s.push_str("File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n\n");
    s.push_str(&format!("xmin = {xmin}\nxmax = {xmax}\ntiers? <exists>\nsize = {}\nitem []:\n", tiers.len()));
    for (i, t) in tiers.iter().enumerate() {
        s.push_str(&format!("    item [{}]:\n", i + 1));
        s.push_str("        class = \"IntervalTier\"\n");
        s.push_str(&format!("        name = {}\n", quote(&t.name)));
        s.push_str(&format!("        xmin = {}\n        xmax = {}\n", t.xmin, t.xmax));
        s.push_str(&format!("        intervals: size = {}\n", t.intervals.len()));
        for (j, iv) in t.intervals.iter().enumerate() {
            s.push_str(&format!("        intervals [{}]:\n", j + 1));
            s.push_str(&format!("            xmin = {}\n            xmax = {}\n", iv.xmin, iv.xmax));
            s.push_str(&format!("            text = {}\n", quote(&iv.label)));
        }
    }
    Ok(s)
}

pub fn write_textgrid(tiers: &[PhonemeTier], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = textgrid_to_string(tiers)?;
    fs::write(path, text).map_err(|source| AlignmentError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct VisemeClass(u8);

impl VisemeClass {
    pub const COUNT: usize = 15;
    pub const SILENCE: VisemeClass = VisemeClass(0);

    pub fn new(id: u8) -> Option<Self> {
        ((id as usize) < Self::COUNT).then_some(VisemeClass(id))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn all() -> impl Iterator<Item = VisemeClass> {
        (0..Self::COUNT as u8).map(VisemeClass)
    }
}

impl TryFrom<u8> for VisemeClass {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        VisemeClass::new(v).ok_or_else(|| format!("viseme class {v} out of range 0..=14"))
    }
}

impl From<VisemeClass> for u8 {
    fn from(v: VisemeClass) -> u8 {
        v.0
    }
}

impl fmt::Display for VisemeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "V{}", self.0)
    }
}

/// Default phoneme groups, one row per viseme class (row 0 is silence).
pub const DEFAULT_GROUPS: [&[&str]; 15] = [
    &["sil"],
    &["P", "B", "M"],
    &["F", "V"],
    &["TH", "DH"],
    &["T", "D"],
    &["K", "G", "NG", "HH"],
    &["CH", "JH", "SH", "ZH"],
    &["S", "Z"],
    &["N", "L"],
    &["R", "ER"],
    &["AA", "AH", "AY", "AW"],
    &["EH", "EY", "AE"],
    &["IY", "IH", "Y"],
    &["AO", "OW", "OY"],
    &["UW", "UH", "W"],
];

/// Total, surjective map from the ARPAbet inventory plus `sil` onto the 15 classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisemeMap {
    table: BTreeMap<String, VisemeClass>,
}

impl Default for VisemeMap {
    fn default() -> Self {
        let table = DEFAULT_GROUPS
            .iter()
            .enumerate()
            .flat_map(|(c, group)| group.iter().map(move |p| (p.to_string(), VisemeClass(c as u8))))
            .collect();
        VisemeMap::new(table).expect("default table is total and surjective")
    }
}

impl VisemeMap {
    pub fn new(entries: BTreeMap<String, VisemeClass>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (k, v) in entries {
            let key = normalize_label(&k);
            if let Some(prev) = table.insert(key.clone(), v) {
                if prev != v {
                    return Err(AlignmentError::InvalidMap(format!(
                        "'{k}' normalizes to '{key}' which is already mapped to {prev}"
                    )));
                }
            }
        }
        for p in ARPABET.iter().copied().chain([SILENCE]) {
            if !table.contains_key(p) {
                return Err(AlignmentError::InvalidMap(format!("phoneme '{p}' has no viseme")));
            }
        }
        let mut hit = [false; VisemeClass::COUNT];
        for v in table.values() {
            hit[v.index()] = true;
        }
        if let Some(c) = hit.iter().position(|h| !h) {
            return Err(AlignmentError::InvalidMap(format!("no phoneme maps to class {c}")));
        }
        Ok(VisemeMap { table })
    }

    /// Loads `{phoneme: class_id}` from JSON.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, u8> =
            serde_json::from_str(text).map_err(|e| AlignmentError::InvalidMap(e.to_string()))?;
        let entries = raw
            .into_iter()
            .map(|(k, v)| {
                VisemeClass::new(v)
                    .map(|c| (k.clone(), c))
                    .ok_or_else(|| AlignmentError::InvalidMap(format!("'{k}' maps to {v}, outside 0..=14")))
            })
            .collect::<Result<_>>()?;
        VisemeMap::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| AlignmentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let raw: BTreeMap<&str, u8> = self.table.iter().map(|(k, v)| (k.as_str(), v.0)).collect();
        serde_json::to_string_pretty(&raw).expect("map serializes")
    }

    pub fn get(&self, label: &str) -> Option<VisemeClass> {
        self.table.get(&normalize_label(label)).copied()
    }

    pub fn phonemes(&self) -> impl Iterator<Item = (&str, VisemeClass)> {
        self.table.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn phoneme_to_viseme(label: &str, map: &VisemeMap) -> Result<VisemeClass> {
    map.get(label)
        .ok_or_else(|| AlignmentError::UnmappedPhoneme(label.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisemeInterval {
    pub xmin: f64,
    pub xmax: f64,
    pub class: VisemeClass,
}

/// Relabels each interval; boundaries are kept and neighbours are never merged.
pub fn tier_to_viseme_intervals(tier: &PhonemeTier, map: &VisemeMap) -> Result<Vec<VisemeInterval>> {
    tier.intervals
        .iter()
        .map(|iv| {
            Ok(VisemeInterval {
                xmin: iv.xmin,
                xmax: iv.xmax,
                class: phoneme_to_viseme(&iv.label, map)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const HAND_WRITTEN: &str = r#"File type = "ooTextFile"
Object class = "TextGrid"

xmin = 0
xmax = 0.4
tiers? <exists>
size = 2
item []:
    item [1]:
        class = "IntervalTier"
        name = "phones"
        xmin = 0
        xmax = 0.4
        intervals: size = 3
        intervals [1]:
            xmin = 0.00
            xmax = 0.10
            text = "sil"
        intervals [2]:
            xmin = 0.10
            xmax = 0.25
            text = "HH"
        intervals [3]:
            xmin = 0.25
            xmax = 0.40
            text = "AH0"
    item [2]:
        class = "TextTier"
        name = "events"
        xmin = 0
        xmax = 0.4
        points: size = 1
        points [1]:
            number = 0.2
            mark = "say ""hi"""
"#;

    #[test]
    fn parses_hand_written_grid() {
        let parsed = parse_textgrid_str(HAND_WRITTEN).unwrap();
        assert_eq!(parsed.skipped_point_tiers, 1);
        assert_eq!(parsed.tiers.len(), 1);
        let labels: Vec<&str> = parsed.tiers[0].intervals.iter().map(|i| i.label.as_str()).collect();
        assert_eq!(labels, ["sil", "HH", "AH"]);
        assert_eq!(parsed.tiers[0].intervals[1].xmin, 0.10);
        assert_eq!(parsed.tiers[0].intervals[2].xmax, 0.40);
    }

    #[test]
    fn empty_tier_parses() {
        let tier = PhonemeTier::new("phones", 0.0, 1.0, vec![]).unwrap();
        let text = textgrid_to_string(&[tier.clone()]).unwrap();
        assert_eq!(parse_textgrid_str(&text).unwrap().tiers, vec![tier]);
    }

    #[test]
    fn empty_tier_list_round_trips() {
        let text = textgrid_to_string(&[]).unwrap();
        assert!(parse_textgrid_str(&text).unwrap().tiers.is_empty());
    }

    #[test]
    fn reversed_interval_in_file_is_validation_error() {
        let bad = HAND_WRITTEN.replace("xmax = 0.25", "xmax = 0.05");
        assert!(matches!(parse_textgrid_str(&bad), Err(AlignmentError::Validation(_))));
    }

    #[test]
    fn overlapping_intervals_rejected_on_write() {
        let tier = PhonemeTier {
            name: "p".into(),
            xmin: 0.0,
            xmax: 1.0,
            intervals: vec![
                PhonemeInterval::new(0.0, 0.5, "AA").unwrap(),
                PhonemeInterval::new(0.4, 0.8, "B").unwrap(),
            ],
        };
        assert!(textgrid_to_string(&[tier]).is_err());
    }

    #[test]
    fn malformed_structure_reports_line() {
        let bad = HAND_WRITTEN.replace("            text = \"HH\"", "            txt = \"HH\"");
        match parse_textgrid_str(&bad) {
            Err(AlignmentError::Parse { line, .. }) => assert_eq!(line, 22),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_form_rejected() {
        let short = "File type = \"ooTextFile\"\nObject class = \"TextGrid\"\n\n0\n1\n<exists>\n1\n";
        assert!(matches!(parse_textgrid_str(short), Err(AlignmentError::Parse { .. })));
    }

    #[test]
    fn default_table_lookups() {
        let m = VisemeMap::default();
        assert_eq!(phoneme_to_viseme("P", &m).unwrap().id(), 1);
        assert_eq!(phoneme_to_viseme("sil", &m).unwrap().id(), 0);
        assert_eq!(phoneme_to_viseme("sp", &m).unwrap().id(), 0);
        assert_eq!(phoneme_to_viseme("ZH", &m).unwrap(), phoneme_to_viseme("SH", &m).unwrap());
        assert_eq!(phoneme_to_viseme("ah1", &m).unwrap(), phoneme_to_viseme("AH", &m).unwrap());
        match phoneme_to_viseme("XX", &m) {
            Err(AlignmentError::UnmappedPhoneme(p)) => assert_eq!(p, "XX"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tier_relabel() {
        let m = VisemeMap::default();
        let tier = PhonemeTier::new(
            "phones",
            0.0,
            0.3,
            vec![
                PhonemeInterval::new(0.0, 0.1, "P").unwrap(),
                PhonemeInterval::new(0.1, 0.2, "IY").unwrap(),
                PhonemeInterval::new(0.2, 0.3, "sil").unwrap(),
            ],
        )
        .unwrap();
        let classes: Vec<u8> = tier_to_viseme_intervals(&tier, &m)
            .unwrap()
            .iter()
            .map(|v| v.class.id())
            .collect();
        assert_eq!(classes, [1, 12, 0]);
        let empty = PhonemeTier::new("phones", 0.0, 0.3, vec![]).unwrap();
        assert!(tier_to_viseme_intervals(&empty, &m).unwrap().is_empty());
        let unknown = PhonemeTier::new("p", 0.0, 0.1, vec![PhonemeInterval::new(0.0, 0.1, "XX").unwrap()]).unwrap();
        assert!(matches!(
            tier_to_viseme_intervals(&unknown, &m),
            Err(AlignmentError::UnmappedPhoneme(p)) if p == "XX"
        ));
    }

    #[test]
    fn map_json_validation() {
        let m = VisemeMap::default();
        assert_eq!(VisemeMap::from_json(&m.to_json()).unwrap(), m);
        let mut raw: BTreeMap<String, u8> = serde_json::from_str(&m.to_json()).unwrap();
        raw.remove("ZH");
        let err = VisemeMap::from_json(&serde_json::to_string(&raw).unwrap()).unwrap_err();
        assert!(err.to_string().contains("ZH"));
        // Collapse class 3 into 2: no longer surjective.
        let mut raw: BTreeMap<String, u8> = serde_json::from_str(&m.to_json()).unwrap();
        raw.insert("TH".into(), 2);
        raw.insert("DH".into(), 2);
        assert!(VisemeMap::from_json(&serde_json::to_string(&raw).unwrap()).is_err());
    }
}
