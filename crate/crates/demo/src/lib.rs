//! Browser bindings for three small views of the pipeline: the preprocessing
//! filter's magnitude response, a synthetic EEG/EMG sentence, and closed-set
//! sentence matching by edit distance. Results cross the boundary as JSON.

use serde::Serialize;
use viseme_core::alignment::{VisemeClass, VisemeMap};
use viseme_core::dsp::PreprocessParams;
use viseme_core::reconstruct::{match_closed_set, SentenceCatalog, VisemeSequence};
use viseme_core::synth::{gen_corpus, gen_sentence, render_recording, SynthConfig};
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct Response {
    pub freqs: Vec<f64>,
    pub db: Vec<f64>,
}

/// Cascade magnitude (band-pass plus line-noise notches) in dB on `n_points`
/// frequencies from 0 to Nyquist.
pub fn response(order: usize, lo: f64, hi: f64, notch_q: f64, fs: f64, n_points: usize) -> Result<Response, String> {
    let params = PreprocessParams { order, lo, hi, notch_q, ..PreprocessParams::default() };
    let filters = params.design(fs).map_err(|e| e.to_string())?;
    let n = n_points.max(2);
    let freqs: Vec<f64> = (0..n).map(|i| i as f64 * fs / 2.0 / (n - 1) as f64).collect();
    let db = freqs
        .iter()
        .map(|&f| {
            let mag: f64 = filters.iter().map(|flt| flt.magnitude(f)).product();
            20.0 * mag.max(1e-12).log10()
        })
        .collect();
    Ok(Response { freqs, db })
}

#[derive(Debug, Serialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub phoneme: String,
    pub viseme: u8,
}

#[derive(Debug, Serialize)]
pub struct Rendered {
    pub fs: f64,
    pub channel: String,
    pub samples: Vec<f64>,
    pub spans: Vec<Span>,
}

fn demo_config(seed: u64, snr_db: f64) -> SynthConfig {
    SynthConfig {
        n_sentences: 1,
        phonemes_per_sentence: (6, 10),
        seed,
        snr_db,
        ..SynthConfig::default()
    }
}

/// One synthetic sentence, returning a single channel and its phoneme spans.
pub fn render(seed: u64, snr_db: f64, channel: usize) -> Result<Rendered, String> {
    let cfg = demo_config(seed, snr_db);
    let map = VisemeMap::default();
    let sentence = gen_sentence(&cfg, 1);
    let rec = render_recording(&sentence, &cfg, &map).map_err(|e| e.to_string())?;
    let meta = rec
        .channels()
        .get(channel)
        .ok_or_else(|| format!("channel {channel} out of range (0..{})", rec.n_channels()))?;
    let visemes = sentence.visemes(&map).map_err(|e| e.to_string())?;
    let spans = sentence
        .spans()
        .into_iter()
        .zip(&sentence.phonemes)
        .zip(visemes)
        .map(|(((start, end), p), v)| Span { start, end, phoneme: p.clone(), viseme: v.id() })
        .collect();
    Ok(Rendered {
        fs: rec.fs(),
        channel: meta.name.clone(),
        samples: rec.channel(channel).to_vec(),
        spans,
    })
}

/// Catalog of `n` synthetic sentences.
pub fn catalog(n: usize, seed: u64) -> Result<SentenceCatalog, String> {
    let cfg = SynthConfig { n_sentences: n, seed, ..SynthConfig::default() };
    let corpus = gen_corpus(&cfg).map_err(|e| e.to_string())?;
    corpus.catalog(&VisemeMap::default()).map_err(|e| e.to_string())
}

/// Parses whitespace- or comma-separated viseme ids.
pub fn parse_query(text: &str) -> Result<Vec<VisemeClass>, String> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            let id: u8 = t.parse().map_err(|_| format!("'{t}' is not a viseme id"))?;
            VisemeClass::new(id).ok_or_else(|| format!("{id} is not in 0..{}", VisemeClass::COUNT))
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Ranked {
    pub id: u32,
    pub distance: usize,
    pub text: String,
}

#[derive(Debug, Serialize)]
pub struct MatchView {
    pub best: u32,
    pub distance: usize,
    pub margin: Option<usize>,
    pub ranking: Vec<Ranked>,
}

pub fn match_query(query: &str, n: usize, seed: u64) -> Result<MatchView, String> {
    let cat = catalog(n, seed)?;
    let classes = parse_query(query)?;
    let seq = VisemeSequence { sentence_id: None, classes };
    let m = match_closed_set(&seq, &cat).map_err(|e| e.to_string())?;
    let mut ranking: Vec<Ranked> = cat
        .entries
        .iter()
        .map(|e| Ranked {
            id: e.id,
            distance: viseme_core::reconstruct::edit_distance(&seq.classes, &e.viseme_sequence),
            text: e.text.clone(),
        })
        .collect();
    ranking.sort_by_key(|r| (r.distance, r.id));
    ranking.truncate(5);
    Ok(MatchView { best: m.sentence_id, distance: m.distance, margin: m.margin, ranking })
}

fn to_json<T: Serialize>(v: Result<T, String>) -> Result<String, JsValue> {
    v.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn filter_response(order: usize, lo: f64, hi: f64, notch_q: f64, fs: f64, n_points: usize) -> Result<String, JsValue> {
    to_json(response(order, lo, hi, notch_q, fs, n_points))
}

#[wasm_bindgen]
pub fn render_sentence(seed: u32, snr_db: f64, channel: usize) -> Result<String, JsValue> {
    to_json(render(seed as u64, snr_db, channel))
}

#[wasm_bindgen]
pub fn demo_catalog(n: usize, seed: u32) -> Result<String, JsValue> {
    to_json(catalog(n, seed as u64))
}

#[wasm_bindgen]
pub fn match_sequence(query: &str, n: usize, seed: u32) -> Result<String, JsValue> {
    to_json(match_query(query, n, seed as u64))
}
