use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Cell, Pipeline, PipelineError, Result, Stage};
use crate::alignment::{parse_textgrid, tier_to_viseme_intervals, PhonemeTier, VisemeInterval, VisemeMap};
use crate::dataset::{build_dataset, extract_epochs, split_sentences, Dataset, LabeledTrial, Split};
use crate::decoder::{predict_logits, train_with, Checkpoint, DecoderError, EpochLoss, ModelParams, TrainConfig};
use crate::dsp::{preprocess_recording, PreprocessParams};
use crate::eval::{read_json, render_report, write_json, MetricsReport, Predictions};
use crate::parallel;
use crate::reconstruct::{
    assemble_sequence, infer_batch, match_closed_set, train_sequence_model, CatalogEntry, SentenceCatalog,
    VisemeSequence,
};
use crate::signal_io::{read_brainvision, write_brainvision, Recording};
use crate::synth::{self, TIER_NAME};

const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest<T> {
    format_version: u32,
    stage: String,
    #[serde(flatten)]
    body: T,
}

fn stage_dir(p: &Pipeline, stage: Stage) -> PathBuf {
    p.work().join(stage.name())
}

/// Clears and recreates a stage's output directory.
fn fresh_dir(p: &Pipeline, stage: Stage) -> Result<PathBuf> {
    let dir = stage_dir(p, stage);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(PipelineError::io(&dir))?;
    }
    fs::create_dir_all(&dir).map_err(PipelineError::io(&dir))?;
    Ok(dir)
}

fn save_manifest<T: Serialize>(p: &Pipeline, stage: Stage, body: T) -> Result<()> {
    let m = Manifest { format_version: FORMAT_VERSION, stage: stage.name().to_string(), body };
    Ok(write_json(&stage_dir(p, stage).join(MANIFEST), &m)?)
}

/// Loads a prior stage's manifest, naming that stage when it is absent.
fn require<T: for<'de> Deserialize<'de>>(p: &Pipeline, stage: Stage) -> Result<T> {
    let path = stage_dir(p, stage).join(MANIFEST);
    if !path.exists() {
        return Err(PipelineError::MissingStage { stage, path: path.display().to_string() });
    }
    let m: Manifest<T> = read_json(&path)?;
    if m.format_version != FORMAT_VERSION || m.stage != stage.name() {
        return Err(PipelineError::Config(format!(
            "{} is not a version {FORMAT_VERSION} {stage} manifest",
            path.display()
        )));
    }
    Ok(m.body)
}

fn viseme_map(p: &Pipeline) -> Result<VisemeMap> {
    match &p.config.viseme_map {
        Some(path) => Ok(VisemeMap::load(path)?),
        None => Ok(VisemeMap::default()),
    }
}

fn collect<T>(items: Vec<Result<T>>) -> Result<Vec<T>> {
    items.into_iter().collect()
}

pub(super) fn synth(p: &Pipeline) -> Result<()> {
    let corpus = synth::emit(&p.config.synth, &p.config.paths.raw_dir)?;
    p.log.event(
        Stage::Synth,
        "corpus",
        json!({ "sentences": corpus.sentences.len(), "out": p.config.paths.raw_dir }),
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IngestedSentence {
    id: u32,
    header: PathBuf,
    n_samples: usize,
    intervals: Vec<VisemeInterval>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IngestManifest {
    fs: f64,
    sentences: Vec<IngestedSentence>,
}

fn trailing_number(stem: &str) -> Option<u32> {
    let digits: String = stem.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

fn phone_tier(tiers: Vec<PhonemeTier>, path: &Path) -> Result<PhonemeTier> {
    let mut tiers = tiers;
    let pos = tiers.iter().position(|t| t.name == TIER_NAME).unwrap_or(0);
    if tiers.is_empty() {
        return Err(PipelineError::Config(format!("{} has no interval tier", path.display())));
    }
    Ok(tiers.swap_remove(pos))
}

pub(super) fn ingest(p: &Pipeline) -> Result<()> {
    let raw = &p.config.paths.raw_dir;
    let missing = || PipelineError::MissingStage { stage: Stage::Synth, path: raw.display().to_string() };
    let entries = fs::read_dir(raw).map_err(|_| missing())?;
    let mut headers: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|path| path.extension().is_some_and(|x| x == "vhdr"))
        .collect();
    headers.sort();
    if headers.is_empty() {
        return Err(missing());
    }
    let stems: Vec<Option<u32>> = headers
        .iter()
        .map(|h| trailing_number(&h.file_stem().unwrap_or_default().to_string_lossy()))
        .collect();
    let numbered = stems.iter().all(Option::is_some) && stems.iter().collect::<BTreeSet<_>>().len() == stems.len();
    let ids: Vec<u32> = if numbered {
        stems.into_iter().flatten().collect()
    } else {
        (1..=headers.len() as u32).collect()
    };
    let map = viseme_map(p)?;
    let fs_cfg = p.config.fs;
    let loaded = parallel::map_indexed(headers.len(), |i| -> Result<(IngestedSentence, CatalogEntry)> {
        let header = &headers[i];
        let (rec, _) = read_brainvision(header)?;
        if (rec.fs() - fs_cfg).abs() > 1e-6 * fs_cfg {
            return Err(PipelineError::Config(format!(
                "{}: sampling rate {} Hz differs from configured fs {fs_cfg} Hz",
                header.display(),
                rec.fs()
            )));
        }
        let tg = header.with_extension("TextGrid");
        let tier = phone_tier(parse_textgrid(&tg)?, &tg)?;
        let intervals = tier_to_viseme_intervals(&tier, &map)?;
        let text: Vec<&str> = tier.intervals.iter().map(|iv| iv.label.as_str()).collect();
        let entry = CatalogEntry {
            id: ids[i],
            text: text.join(" "),
            viseme_sequence: intervals.iter().map(|iv| iv.class).collect(),
        };
        let sentence = IngestedSentence { id: ids[i], header: header.clone(), n_samples: rec.n_samples(), intervals };
        Ok((sentence, entry))
    });
    let (sentences, entries): (Vec<_>, Vec<_>) = collect(loaded)?.into_iter().unzip();
    let catalog = SentenceCatalog::new(entries)?;
    let dir = fresh_dir(p, Stage::Ingest)?;
    catalog.save(dir.join(synth::CATALOG_FILE))?;
    if catalog.has_duplicate_sequences() {
        p.log.event(Stage::Ingest, "warning", json!({ "message": "catalog holds duplicate viseme sequences" }));
    }
    p.log.event(Stage::Ingest, "recordings", json!({ "count": sentences.len() }));
    save_manifest(p, Stage::Ingest, IngestManifest { fs: fs_cfg, sentences })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PreprocessManifest {
    filter: PreprocessParams,
    /// Sentence id → file stem inside the stage directory.
    #[serde(with = "string_keys")]
    recordings: BTreeMap<u32, String>,
}

/// Integer map keys stored as JSON strings, which flattened structs require.
mod string_keys {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<u32, String>, s: S) -> Result<S::Ok, S::Error> {
        m.iter().map(|(k, v)| (k.to_string(), v)).collect::<BTreeMap<_, _>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<u32, String>, D::Error> {
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(|_| D::Error::custom(format!("bad sentence id '{k}'"))))
            .collect()
    }
}

pub(super) fn preprocess(p: &Pipeline) -> Result<()> {
    let ingest: IngestManifest = require(p, Stage::Ingest)?;
    let dir = fresh_dir(p, Stage::Preprocess)?;
    let filter = &p.config.filter;
    let done = parallel::map_indexed(ingest.sentences.len(), |i| -> Result<(u32, String)> {
        let s = &ingest.sentences[i];
        let (rec, markers) = read_brainvision(&s.header)?;
        let clean = preprocess_recording(&rec, filter)?;
        let stem = format!("sentence_{:03}", s.id);
        write_brainvision(&clean, &markers, dir.join(&stem))?;
        Ok((s.id, stem))
    });
    let recordings: BTreeMap<u32, String> = collect(done)?.into_iter().collect();
    p.log.event(Stage::Preprocess, "filtered", json!({ "count": recordings.len() }));
    save_manifest(p, Stage::Preprocess, PreprocessManifest { filter: filter.clone(), recordings })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EpochManifest {
    split: Split,
    cells: Vec<Cell>,
}

fn load_preprocessed(p: &Pipeline, pre: &PreprocessManifest, id: u32) -> Result<Recording> {
    let stem = pre.recordings.get(&id).ok_or_else(|| PipelineError::MissingStage {
        stage: Stage::Preprocess,
        path: format!("recording for sentence {id}"),
    })?;
    let header = stage_dir(p, Stage::Preprocess).join(format!("{stem}.vhdr"));
    Ok(read_brainvision(header)?.0)
}

pub(super) fn epoch(p: &Pipeline) -> Result<()> {
    let ingest: IngestManifest = require(p, Stage::Ingest)?;
    let pre: PreprocessManifest = require(p, Stage::Preprocess)?;
    let ids: BTreeSet<u32> = ingest.sentences.iter().map(|s| s.id).collect();
    let split = split_sentences(&ids, p.config.n_test, p.config.seed)?;
    let dir = fresh_dir(p, Stage::Epoch)?;
    let layout = load_preprocessed(p, &pre, ingest.sentences[0].id)?;
    let cells = p.config.cells();
    for cell in &cells {
        let per_sentence = parallel::map_indexed(ingest.sentences.len(), |i| -> Result<(Vec<LabeledTrial>, usize)> {
            let s = &ingest.sentences[i];
            let rec = load_preprocessed(p, &pre, s.id)?;
            let r = extract_epochs(&rec, &s.intervals, s.id, cell.window_ms, cell.modality, p.config.epoch)?;
            Ok((r.trials, r.skipped))
        });
        let mut trials = Vec::new();
        let mut skipped = 0;
        for (t, s) in collect(per_sentence)? {
            trials.extend(t);
            skipped += s;
        }
        let ds = build_dataset(
            trials,
            &layout,
            p.config.fs,
            cell.window_ms,
            cell.modality,
            p.config.epoch,
            split.clone(),
            p.config.seed,
        )?;
        ds.save(dir.join(cell.slug()))?;
        p.log.event(
            Stage::Epoch,
            "dataset",
            json!({
                "cell": cell.slug(),
                "trials": ds.trials.len(),
                "train": ds.train().len(),
                "test": ds.test().len(),
                "skipped": skipped,
            }),
        );
    }
    save_manifest(p, Stage::Epoch, EpochManifest { split, cells })
}

fn require_cell_dataset(p: &Pipeline, cell: &Cell) -> Result<Dataset> {
    let epochs: EpochManifest = require(p, Stage::Epoch)?;
    if !epochs.cells.contains(cell) {
        return Err(PipelineError::MissingStage {
            stage: Stage::Epoch,
            path: format!("dataset for {}", cell.slug()),
        });
    }
    Ok(Dataset::load(stage_dir(p, Stage::Epoch).join(cell.slug()))?)
}

/// Trains on the dataset's training split.
pub fn train_dataset(ds: &Dataset, cfg: &TrainConfig, on_epoch: impl FnMut(&EpochLoss, &ModelParams)) -> Result<Checkpoint> {
    let train = ds.train();
    let (params, history) = train_with(&train, cfg, on_epoch)?;
    Ok(Checkpoint { params, train: cfg.clone(), history })
}

/// Logits for the dataset's test split.
pub fn predict_dataset(ckpt: &Checkpoint, ds: &Dataset) -> Result<Predictions> {
    let m = &ckpt.params.config;
    if m.in_channels != ds.manifest.n_channels || m.len != ds.manifest.n_samples {
        return Err(DecoderError::Shape(format!(
            "checkpoint expects {} channels x {} samples, dataset has {} x {}",
            m.in_channels, m.len, ds.manifest.n_channels, ds.manifest.n_samples
        ))
        .into());
    }
    let test = ds.test();
    let data: Vec<&[f32]> = test.iter().map(|t| t.data.as_slice()).collect();
    let logits = predict_logits(&ckpt.params, &data)?;
    let metas: Vec<_> = test.iter().map(|t| t.meta.clone()).collect();
    Ok(Predictions::new(ds.manifest.modality, ds.manifest.window_ms, &metas, logits))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CellsManifest {
    cells: Vec<CellSummary>,
}

fn cell_file(p: &Pipeline, stage: Stage, cells: &CellsManifest, cell: &Cell) -> Result<PathBuf> {
    cells
        .cells
        .iter()
        .find(|c| c.cell == *cell)
        .map(|c| stage_dir(p, stage).join(&c.file))
        .ok_or_else(|| PipelineError::MissingStage { stage, path: format!("output for {}", cell.slug()) })
}

pub(super) fn train(p: &Pipeline) -> Result<()> {
    require::<EpochManifest>(p, Stage::Epoch)?;
    let dir = fresh_dir(p, Stage::Train)?;
    let mut done = Vec::new();
    for cell in p.config.cells() {
        let ds = require_cell_dataset(p, &cell)?;
        let slug = cell.slug();
        let ckpt = train_dataset(&ds, &p.config.train, |e, _| {
            p.log.event(
                Stage::Train,
                "epoch",
                json!({
                    "cell": slug,
                    "epoch": e.epoch,
                    "steps": e.steps,
                    "loss": e.mean.total,
                    "ddpm": e.mean.ddpm,
                    "ae": e.mean.ae,
                    "cls": e.mean.cls,
                }),
            )
        })?;
        let file = format!("{slug}.ckpt");
        ckpt.save(dir.join(&file))?;
        done.push(CellSummary { cell, file });
    }
    save_manifest(p, Stage::Train, CellsManifest { cells: done })
}

pub(super) fn predict(p: &Pipeline) -> Result<()> {
    let trained: CellsManifest = require(p, Stage::Train)?;
    let dir = fresh_dir(p, Stage::Predict)?;
    let mut done = Vec::new();
    for cell in p.config.cells() {
        let ckpt = Checkpoint::load(cell_file(p, Stage::Train, &trained, &cell)?)?;
        let ds = require_cell_dataset(p, &cell)?;
        let preds = predict_dataset(&ckpt, &ds)?;
        let file = format!("{}.json", cell.slug());
        preds.save(dir.join(&file))?;
        p.log.event(Stage::Predict, "predictions", json!({ "cell": cell.slug(), "trials": preds.trials.len() }));
        done.push(CellSummary { cell, file });
    }
    save_manifest(p, Stage::Predict, CellsManifest { cells: done })
}

pub(super) fn eval(p: &Pipeline) -> Result<()> {
    let predicted: CellsManifest = require(p, Stage::Predict)?;
    let dir = fresh_dir(p, Stage::Eval)?;
    let mut done = Vec::new();
    for cell in p.config.cells() {
        let preds = Predictions::load(cell_file(p, Stage::Predict, &predicted, &cell)?)?;
        let m = preds.evaluate()?;
        let file = format!("{}.json", cell.slug());
        write_json(&dir.join(&file), &m)?;
        p.log.event(
            Stage::Eval,
            "metrics",
            json!({
                "cell": cell.slug(),
                "top1": m.top1_pct,
                "top3": m.top3_pct,
                "f1": m.f1_macro,
                "auc": m.auc_pct,
                "absent_classes": m.absent_classes,
            }),
        );
        done.push(CellSummary { cell, file });
    }
    save_manifest(p, Stage::Eval, CellsManifest { cells: done })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceOutcome {
    pub sentence_id: u32,
    pub n_predicted: usize,
    pub edit_match: u32,
    pub edit_distance: usize,
    pub lstm_match: u32,
    pub lstm_posterior: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub cell: Option<Cell>,
    pub n_sentences: usize,
    pub edit_correct: usize,
    pub lstm_correct: usize,
    pub sentences: Vec<SentenceOutcome>,
}

fn reconstruct_all(
    model: &crate::reconstruct::SequenceModel,
    catalog: &SentenceCatalog,
    seqs: &[VisemeSequence],
    cell: Option<Cell>,
) -> Result<ReconstructionReport> {
    let inferred = infer_batch(model, seqs)?;
    let mut sentences = Vec::with_capacity(seqs.len());
    for (s, inf) in seqs.iter().zip(inferred) {
        let edit = match_closed_set(s, catalog)?;
        let best = inf.posterior.iter().cloned().fold(0.0, f64::max);
        sentences.push(SentenceOutcome {
            sentence_id: s.sentence_id.unwrap_or_default(),
            n_predicted: s.classes.len(),
            edit_match: edit.sentence_id,
            edit_distance: edit.distance,
            lstm_match: inf.sentence_id,
            lstm_posterior: best,
        });
    }
    Ok(ReconstructionReport {
        cell,
        n_sentences: sentences.len(),
        edit_correct: sentences.iter().filter(|o| o.edit_match == o.sentence_id).count(),
        lstm_correct: sentences.iter().filter(|o| o.lstm_match == o.sentence_id).count(),
        sentences,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReconstructManifest {
    ground_truth: String,
    cells: Vec<CellSummary>,
}

pub(super) fn reconstruct(p: &Pipeline) -> Result<()> {
    let predicted: CellsManifest = require(p, Stage::Predict)?;
    let epochs: EpochManifest = require(p, Stage::Epoch)?;
    let full = SentenceCatalog::load(stage_dir(p, Stage::Ingest).join(synth::CATALOG_FILE))?;
    let catalog = full.subset(&epochs.split.test)?;
    let dir = fresh_dir(p, Stage::Reconstruct)?;
    let model = train_sequence_model(&catalog, &p.config.sequence_model)?;
    model.save(dir.join("sequence_model.json"))?;

    let truth: Vec<VisemeSequence> = catalog
        .entries
        .iter()
        .map(|e| VisemeSequence { sentence_id: Some(e.id), classes: e.viseme_sequence.clone() })
        .collect();
    let gt = reconstruct_all(&model, &catalog, &truth, None)?;
    write_json(&dir.join("ground_truth.json"), &gt)?;
    p.log.event(
        Stage::Reconstruct,
        "ground_truth",
        json!({ "sentences": gt.n_sentences, "edit_correct": gt.edit_correct, "lstm_correct": gt.lstm_correct }),
    );

    let mut done = Vec::new();
    for cell in p.config.cells() {
        let preds = Predictions::load(cell_file(p, Stage::Predict, &predicted, &cell)?)?;
        let mut by_sentence: BTreeMap<u32, Vec<(u32, u8)>> = BTreeMap::new();
        for t in &preds.trials {
            by_sentence.entry(t.meta.sentence_id).or_default().push((t.meta.interval_index, t.top3[0]));
        }
        let seqs = by_sentence
            .iter()
            .filter(|(id, _)| catalog.get(**id).is_some())
            .map(|(&id, v)| Ok(assemble_sequence(Some(id), v)?))
            .collect::<Result<Vec<_>>>()?;
        let r = reconstruct_all(&model, &catalog, &seqs, Some(cell))?;
        let file = format!("{}.json", cell.slug());
        write_json(&dir.join(&file), &r)?;
        p.log.event(
            Stage::Reconstruct,
            "sentences",
            json!({
                "cell": cell.slug(),
                "sentences": r.n_sentences,
                "edit_correct": r.edit_correct,
                "lstm_correct": r.lstm_correct,
            }),
        );
        done.push(CellSummary { cell, file });
    }
    save_manifest(p, Stage::Reconstruct, ReconstructManifest { ground_truth: "ground_truth.json".into(), cells: done })
}

pub(super) fn report(p: &Pipeline) -> Result<()> {
    let evaluated: CellsManifest = require(p, Stage::Eval)?;
    let mut metrics = Vec::new();
    for cell in p.config.cells() {
        let m: MetricsReport = read_json(&cell_file(p, Stage::Eval, &evaluated, &cell)?)?;
        metrics.push(m);
    }
    let mut rendered = render_report(&metrics, p.config.report_mode)?;
    if let Ok(rec) = require::<ReconstructManifest>(p, Stage::Reconstruct) {
        let dir = stage_dir(p, Stage::Reconstruct);
        let gt: ReconstructionReport = read_json(&dir.join(&rec.ground_truth))?;
        rendered.text.push_str(&format!(
            "\nSentence reconstruction (closed set of {}):\n  ground truth: edit distance {}/{}, LSTM {}/{}\n",
            gt.n_sentences, gt.edit_correct, gt.n_sentences, gt.lstm_correct, gt.n_sentences
        ));
        for c in &rec.cells {
            let r: ReconstructionReport = read_json(&dir.join(&c.file))?;
            rendered.text.push_str(&format!(
                "  {} {} ms predicted: edit distance {}/{}, LSTM {}/{}\n",
                c.cell.modality.label(),
                c.cell.window_ms,
                r.edit_correct,
                r.n_sentences,
                r.lstm_correct,
                r.n_sentences
            ));
        }
    }
    rendered.write(p.work(), "report")?;
    p.log.event(Stage::Report, "written", json!({ "rows": rendered.table.rows.len() }));
    Ok(())
}
