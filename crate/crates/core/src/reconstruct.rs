//! Sentence reconstruction from per-trial viseme predictions: sequence
//! assembly, closed-set matching by edit distance, and an LSTM classifier
//! over catalog sentences.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::VisemeClass;
use crate::decoder::model::Builder;
use crate::decoder::tape::{softmax_row, Tensor, Var};
use crate::decoder::train::{Optimizer, OptimizerKind, TrainConfig};
use crate::parallel;

#[derive(Debug, Error)]
pub enum ReconstructError {
    #[error("reconstruction domain error: {0}")]
    Domain(String),
    #[error("invalid sequence: {0}")]
    Validation(String),
    #[error("bad file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ReconstructError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReconstructError + '_ {
    move |source| ReconstructError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisemeSequence {
    pub sentence_id: Option<u32>,
    pub classes: Vec<VisemeClass>,
}

impl VisemeSequence {
    pub fn ids(&self) -> Vec<u8> {
        self.classes.iter().map(|c| c.id()).collect()
    }
}

/// Packages `(interval_index, label)` pairs as a sequence in interval order.
pub fn assemble_sequence(sentence_id: Option<u32>, predictions: &[(u32, u8)]) -> Result<VisemeSequence> {
    let mut sorted = predictions.to_vec();
    sorted.sort_by_key(|p| p.0);
    if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(ReconstructError::Validation(format!("interval index {} appears twice", w[0].0)));
    }
    let classes = sorted
        .iter()
        .map(|&(idx, label)| {
            VisemeClass::new(label).ok_or_else(|| {
                ReconstructError::Validation(format!("label {label} at interval {idx} is not a viseme class"))
            })
        })
        .collect::<Result<_>>()?;
    Ok(VisemeSequence { sentence_id, classes })
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: u32,
    pub text: String,
    pub viseme_sequence: Vec<VisemeClass>,
}

/// Closed sentence set, stored as a JSON list of entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct SentenceCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl SentenceCatalog {
    pub fn new(mut entries: Vec<CatalogEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        let cat = SentenceCatalog { entries };
        cat.validate()?;
        Ok(cat)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.id) {
                return Err(ReconstructError::Validation(format!("duplicate catalog id {}", e.id)));
            }
            if e.viseme_sequence.is_empty() {
                return Err(ReconstructError::Validation(format!("catalog entry {} is empty", e.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Entries whose ids are in `ids`, keeping catalog order.
    pub fn subset(&self, ids: &[u32]) -> Result<Self> {
        let want: BTreeSet<u32> = ids.iter().copied().collect();
        let entries: Vec<CatalogEntry> = self.entries.iter().filter(|e| want.contains(&e.id)).cloned().collect();
        if entries.len() != want.len() {
            return Err(ReconstructError::Domain("catalog lacks some requested sentence ids".into()));
        }
        Ok(SentenceCatalog { entries })
    }

    pub fn has_duplicate_sequences(&self) -> bool {
        let set: BTreeSet<&Vec<VisemeClass>> = self.entries.iter().map(|e| &e.viseme_sequence).collect();
        set.len() != self.entries.len()
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let cat: SentenceCatalog = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cat.validate().map_err(|e| e.to_string())?;
        Ok(cat)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|msg| ReconstructError::Format { path: path.display().to_string(), msg })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("catalog serializes");
        fs::write(path, text + "\n").map_err(io_err(path))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub sentence_id: u32,
    pub distance: usize,
    /// Distance of the best entry with a different id, if any.
    pub runner_up_distance: Option<usize>,
    /// `runner_up_distance - distance`; zero when several entries tie.
    pub margin: Option<usize>,
    /// Every id at the winning distance, ascending.
    pub tied_ids: Vec<u32>,
}

/// Nearest catalog entry by edit distance; ties go to the lower id.
pub fn match_closed_set(s: &VisemeSequence, cat: &SentenceCatalog) -> Result<MatchResult> {
    if s.classes.is_empty() {
        return Err(ReconstructError::Domain("cannot match an empty sequence".into()));
    }
    if cat.is_empty() {
        return Err(ReconstructError::Domain("catalog is empty".into()));
    }
    let dists = parallel::map_indexed(cat.len(), |i| edit_distance(&s.classes, &cat.entries[i].viseme_sequence));
    let mut ranked: Vec<(usize, u32)> = dists.iter().zip(&cat.entries).map(|(&d, e)| (d, e.id)).collect();
    ranked.sort_unstable();
    let (best, id) = ranked[0];
    let tied_ids = ranked.iter().take_while(|r| r.0 == best).map(|r| r.1).collect();
    let runner_up_distance = ranked.get(1).map(|r| r.0);
    Ok(MatchResult {
        sentence_id: id,
        distance: best,
        runner_up_distance,
        margin: runner_up_distance.map(|r| r - best),
        tied_ids,
    })
}

/// Replaces each element with probability `rate` by a different class drawn uniformly.
pub fn corrupt(seq: &[VisemeClass], rate: f64, rng: &mut impl Rng) -> Vec<VisemeClass> {
    seq.iter()
        .map(|&c| {
            if rng.random_bool(rate) {
                let shift = rng.random_range(1..VisemeClass::COUNT as u8);
                VisemeClass::new((c.id() + shift) % VisemeClass::COUNT as u8).expect("in range")
            } else {
                c
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqModelConfig {
    pub hidden: usize,
    pub embed_dim: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub substitution_rate: f64,
    /// Corrupted copies of each catalog entry per step, alongside the clean one.
    pub corrupted_copies: usize,
    pub seed: u64,
}

impl Default for SeqModelConfig {
    fn default() -> Self {
        SeqModelConfig {
            hidden: 128,
            embed_dim: 16,
            steps: 150,
            learning_rate: 1e-2,
            substitution_rate: 0.3,
            corrupted_copies: 1,
            seed: 0,
        }
    }
}

/// LSTM over viseme tokens with a classification head on the final state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    pub config: SeqModelConfig,
    pub catalog_ids: Vec<u32>,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<f32>>,
    pub loss_history: Vec<f64>,
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

fn lstm_graph(b: &mut Builder<'_, f32>, cfg: &SeqModelConfig, n_out: usize, seqs: &[&[VisemeClass]]) -> Var {
    let (h_dim, d) = (cfg.hidden, cfg.embed_dim);
    let table = b.param("embed", &[VisemeClass::COUNT, d], crate::decoder::model::Init::Uniform(1.0));
    let mut gate_params = Vec::new();
    for g in GATES {
        let fan = d + h_dim;
        let w = b.param(&format!("lstm.{g}.w"), &[h_dim, fan], crate::decoder::model::Init::Fan(fan));
        let bias_init = if g == "f" {
            crate::decoder::model::Init::Ones
        } else {
            crate::decoder::model::Init::Zeros
        };
        let bias = b.param(&format!("lstm.{g}.b"), &[h_dim], bias_init);
        gate_params.push((w, bias));
    }
    let bsz = seqs.len();
    let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut h = b.tape.leaf(Tensor::zeros(&[bsz, h_dim]));
    let mut c = b.tape.leaf(Tensor::zeros(&[bsz, h_dim]));
    for t in 0..max_len {
        let tokens: Vec<usize> = seqs.iter().map(|s| s.get(t).map_or(0, |v| v.index())).collect();
        let mask: Vec<f32> = seqs.iter().map(|s| if t < s.len() { 1.0 } else { 0.0 }).collect();
        let x = b.tape.gather_rows(table, &tokens);
        let z = b.tape.concat(&[x, h]);
        let pre: Vec<Var> = gate_params.iter().map(|&(w, bias)| b.tape.linear(z, w, bias)).collect();
        let i = b.tape.sigmoid(pre[0]);
        let f = b.tape.sigmoid(pre[1]);
        let g = b.tape.tanh(pre[2]);
        let o = b.tape.sigmoid(pre[3]);
        let fc = b.tape.mul(f, c);
        let ig = b.tape.mul(i, g);
        let c_new = b.tape.add(fc, ig);
        let tc = b.tape.tanh(c_new);
        let h_new = b.tape.mul(o, tc);
        c = b.tape.blend(c_new, c, &mask);
        h = b.tape.blend(h_new, h, &mask);
    }
    b.linear(h, "head", h_dim, n_out)
}

fn seq_train_config(cfg: &SeqModelConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.learning_rate,
        optimizer: OptimizerKind::Adam,
        clip_norm: 1.0,
        ..TrainConfig::default()
    }
}

/// Trains the recurrent classifier on catalog sequences plus corrupted copies.
pub fn train_sequence_model(cat: &SentenceCatalog, cfg: &SeqModelConfig) -> Result<SequenceModel> {
    if cat.is_empty() {
        return Err(ReconstructError::Domain("cannot train on an empty catalog".into()));
    }
    if cfg.hidden == 0 || cfg.embed_dim == 0 || !(0.0..=1.0).contains(&cfg.substitution_rate) {
        return Err(ReconstructError::Domain("invalid sequence model config".into()));
    }
    if cat.has_duplicate_sequences() {
        log::warn!("catalog holds duplicate viseme sequences; those sentences cannot be told apart");
    }
    let n_out = cat.len();
    let probe: Vec<&[VisemeClass]> = vec![&cat.entries[0].viseme_sequence[..1]];
    let mut init = Builder::<f32>::init(cfg.seed);
    lstm_graph(&mut init, cfg, n_out, &probe);
    let (names, mut tensors) = init.into_created();

    let mut opt = Optimizer::for_tensors(&seq_train_config(cfg), &tensors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut seqs: Vec<Vec<VisemeClass>> = Vec::new();
        let mut labels = Vec::new();
        for (k, e) in cat.entries.iter().enumerate() {
            seqs.push(e.viseme_sequence.clone());
            labels.push(k);
            for _ in 0..cfg.corrupted_copies {
                seqs.push(corrupt(&e.viseme_sequence, cfg.substitution_rate, &mut rng));
                labels.push(k);
            }
        }
        let refs: Vec<&[VisemeClass]> = seqs.iter().map(Vec::as_slice).collect();
        let mut b = Builder::bind(&tensors);
        let logits = lstm_graph(&mut b, cfg, n_out, &refs);
        let loss = b.tape.cross_entropy(logits, &labels);
        let value = b.tape.value(loss).data[0] as f64;
        if !value.is_finite() {
            return Err(ReconstructError::Domain("sequence model training diverged".into()));
        }
        history.push(value);
        let grads = b.tape.backward(loss);
        let mut g: Vec<Vec<f32>> = b
            .params
            .iter()
            .zip(&tensors)
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
            .collect();
        drop(b);
        opt.step_tensors(&mut tensors, &mut g);
    }
    Ok(SequenceModel {
        config: cfg.clone(),
        catalog_ids: cat.entries.iter().map(|e| e.id).collect(),
        names,
        tensors,
        loss_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub sentence_id: u32,
    pub posterior: Vec<f64>,
}

pub fn infer_sentence(model: &SequenceModel, s: &VisemeSequence) -> Result<Inference> {
    Ok(infer_batch(model, std::slice::from_ref(s))?.remove(0))
}

pub fn infer_batch(model: &SequenceModel, seqs: &[VisemeSequence]) -> Result<Vec<Inference>> {
    if seqs.iter().any(|s| s.classes.is_empty()) {
        return Err(ReconstructError::Domain("cannot classify an empty sequence".into()));
    }
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let refs: Vec<&[VisemeClass]> = seqs.iter().map(|s| s.classes.as_slice()).collect();
    let mut b = Builder::bind(&model.tensors);
    let logits = lstm_graph(&mut b, &model.config, model.catalog_ids.len(), &refs);
    let k = model.catalog_ids.len();
    Ok(b.tape
        .value(logits)
        .data
        .chunks(k)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let (posterior, _) = softmax_row(&row);
            // first maximum, so ties go to the lower catalog position
            let best = posterior
                .iter()
                .enumerate()
                .fold(0, |bi, (i, &p)| if p > posterior[bi] { i } else { bi });
            Inference { sentence_id: model.catalog_ids[best], posterior }
        })
        .collect())
}

impl SequenceModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("model serializes");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| ReconstructError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(ids: &[u8]) -> Vec<VisemeClass> {
        ids.iter().map(|&i| VisemeClass::new(i).unwrap()).collect()
    }

    #[test]
    fn assemble_orders_and_validates() {
        let s = assemble_sequence(Some(3), &[(0, 0), (1, 1), (2, 12), (3, 0)]).unwrap();
        assert_eq!(s.ids(), vec![0, 1, 12, 0]);
        let s = assemble_sequence(None, &[(2, 5), (0, 4), (1, 9)]).unwrap();
        assert_eq!(s.ids(), vec![4, 9, 5]);
        assert!(assemble_sequence(None, &[(0, 15)]).is_err());
        assert!(assemble_sequence(None, &[(0, 1), (0, 2)]).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 4, 3]), 1);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance::<u8>(&[1, 2, 3], &[]), 3);
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn match_rules() {
        let cat = SentenceCatalog::new(vec![
            CatalogEntry { id: 9, text: "b".into(), viseme_sequence: v(&[1, 2, 3]) },
            CatalogEntry { id: 4, text: "a".into(), viseme_sequence: v(&[1, 2, 3]) },
            CatalogEntry { id: 7, text: "c".into(), viseme_sequence: v(&[5, 6, 7, 8]) },
        ])
        .unwrap();
        let s = VisemeSequence { sentence_id: None, classes: v(&[1, 2, 3]) };
        let m = match_closed_set(&s, &cat).unwrap();
        assert_eq!((m.sentence_id, m.distance, m.margin), (4, 0, Some(0)));
        assert_eq!(m.tied_ids, vec![4, 9]);
        let s = VisemeSequence { sentence_id: None, classes: v(&[5, 6, 7, 8]) };
        let m = match_closed_set(&s, &cat).unwrap();
        assert_eq!((m.sentence_id, m.distance), (7, 0));
        assert!(m.margin.unwrap() > 0);
        assert!(match_closed_set(&VisemeSequence { sentence_id: None, classes: vec![] }, &cat).is_err());
        assert!(match_closed_set(&s, &SentenceCatalog::default()).is_err());
    }

    #[test]
    fn catalog_json_round_trip() {
        let cat = SentenceCatalog::new(vec![CatalogEntry { id: 1, text: "x".into(), viseme_sequence: v(&[0, 3, 0]) }]).unwrap();
        let text = serde_json::to_string(&cat).unwrap();
        assert!(text.starts_with('['));
        assert_eq!(SentenceCatalog::from_json(&text).unwrap(), cat);
        assert!(SentenceCatalog::from_json(r#"[{"id":1,"text":"","viseme_sequence":[0]},{"id":1,"text":"","viseme_sequence":[2]}]"#).is_err());
        assert!(SentenceCatalog::from_json(r#"[{"id":1,"text":"","viseme_sequence":[15]}]"#).is_err());
    }

    #[test]
    fn corruption_always_changes_the_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = v(&[3; 200]);
        let out = corrupt(&seq, 1.0, &mut rng);
        assert!(out.iter().all(|c| c.id() != 3));
        assert_eq!(corrupt(&seq, 0.0, &mut rng), seq);
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(train_sequence_model(&SentenceCatalog::default(), &SeqModelConfig::default()).is_err());
    }
}
