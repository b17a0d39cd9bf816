use std::path::Path;

use viseme_core::pipeline::{Logger, Pipeline, PipelineConfig, PipelineError, Stage};

fn config(dir: &Path, extra: &[&str]) -> PipelineConfig {
    let mut overrides = vec![
        format!("paths.raw_dir={}", dir.join("raw").display()),
        format!("paths.work_dir={}", dir.join("work").display()),
    ];
    overrides.extend(extra.iter().map(|s| s.to_string()));
    PipelineConfig::from_json_with(include_str!("../../../configs/smoke.json"), &overrides).unwrap()
}

#[test]
fn later_stage_without_inputs_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config(dir.path(), &[]), Logger::null());
    match p.run(Stage::Eval) {
        Err(PipelineError::MissingStage { stage, .. }) => assert_eq!(stage, Stage::Predict),
        other => panic!("{other:?}"),
    }
    assert!(!dir.path().join("work/.lock").exists());
}

#[test]
fn stages_rerun_to_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config(dir.path(), &["windows_ms=[64]"]), Logger::null());
    p.run_all().unwrap();
    let report = std::fs::read(dir.path().join("work/report.json")).unwrap();
    let epoch = std::fs::read(dir.path().join("work/epoch/manifest.json")).unwrap();
    for stage in [Stage::Epoch, Stage::Train, Stage::Predict, Stage::Eval, Stage::Reconstruct, Stage::Report] {
        p.run(stage).unwrap();
    }
    assert_eq!(epoch, std::fs::read(dir.path().join("work/epoch/manifest.json")).unwrap());
    assert_eq!(report, std::fs::read(dir.path().join("work/report.json")).unwrap());
    let text = std::fs::read_to_string(dir.path().join("work/report.txt")).unwrap();
    assert!(text.contains("Sentence reconstruction"), "{text}");
}

#[test]
fn existing_corpus_is_used_when_synthesis_is_off() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config(dir.path(), &["synthesize=false"]), Logger::null());
    let err = p.run_all().unwrap_err();
    assert!(err.to_string().contains("raw"), "{err}");
    Pipeline::new(config(dir.path(), &[]), Logger::null()).run(Stage::Synth).unwrap();
    p.run(Stage::Ingest).unwrap();
}

#[test]
fn config_validation_rejects_bad_windows() {
    let dir = tempfile::tempdir().unwrap();
    let text = include_str!("../../../configs/smoke.json");
    for bad in ["windows_ms=[]", "windows_ms=[64,64]", "windows_ms=[65]", "n_test=0", "filter.hi=700", "fs=2000"] {
        let overrides = [format!("paths.work_dir={}", dir.path().display()), bad.to_string()];
        assert!(matches!(PipelineConfig::from_json_with(text, &overrides), Err(PipelineError::Config(_))), "{bad}");
    }
}

#[test]
fn shipped_configs_parse() {
    for text in [
        include_str!("../../../configs/pipeline.json"),
        include_str!("../../../configs/smoke.json"),
        include_str!("../../../configs/synthetic_e2e.json"),
    ] {
        PipelineConfig::from_json_with(text, &[]).unwrap();
    }
}
