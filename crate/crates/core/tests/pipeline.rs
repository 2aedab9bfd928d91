use std::fs;
use std::path::{Path, PathBuf};

use graphonomy::params::manifest_path;
use graphonomy::synth::{generate, GenSpec};
use graphonomy::train::{evaluate, train, AnyModel, ExperimentConfig, LogRecord, TrainOptions};
use graphonomy::Error;
use serde_json::{json, Value};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn small_data(dir: &Path, gen: &str, name: &str) -> PathBuf {
    let mut spec = GenSpec::load(root().join("configs").join(gen)).unwrap();
    spec.height = 12;
    spec.width = 12;
    spec.train = 8;
    spec.test = 4;
    let out = dir.join(name);
    generate(&spec, &out, 1).unwrap();
    out
}

fn config(dir: &Path, name: &str, data: &Path, body: Value) -> ExperimentConfig {
    let mut cfg = json!({
        "name": name,
        "paths": {
            "taxonomy": root().join("assets/human_body_taxonomy.json"),
            "embeddings": root().join("assets/embeddings.txt"),
            "data": data,
            "checkpoints": dir.join("ck"),
        },
        "model": {"dim": 6, "rounds": 1},
        "optimizer": {"base_lr": 0.1, "iterations": 10, "batch": 2},
        "seed": 5
    });
    for (k, v) in body.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

fn opts() -> TrainOptions {
    TrainOptions { workers: 1, from: None }
}

#[test]
fn transfer_pretrain_then_fine_tune() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "gen_parsing.json", "parsing");
    let cfg = config(
        dir.path(),
        "tp",
        &data,
        json!({
            "mode": "transfer_pretrain",
            "domains": ["coarse", "medium", "fine"],
            "target": "fine",
            "model": {"dim": 6, "rounds": 1, "transfer": {"scheme": "handcraft+semantic"}},
            "pretrain": {"base_lr": 0.1, "iterations": 6, "batch": 2}
        }),
    );
    let out = train(&cfg, &opts()).unwrap();
    assert_eq!(out.log.len(), 16);
    assert!(out.log[..6].iter().all(|r| r.domain != "fine"));
    assert!(out.log[6..].iter().all(|r| r.domain == "fine"));
    let text = fs::read_to_string(&out.log_path).unwrap();
    let parsed: Vec<LogRecord> = text.lines().map(|l| LogRecord::parse(l).unwrap()).collect();
    assert_eq!(parsed, out.log);

    let report = evaluate(&out.checkpoint, &data, None, 1).unwrap();
    let fine = &report.domains["fine"];
    assert_eq!(fine.scenes, 4);
    assert_eq!(fine.metrics.pixels, 4 * 144);
    assert!((0.0..=1.0).contains(&fine.metrics.miou));
    assert!(report.panoptic.is_none());
}

#[test]
fn training_is_reproducible_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "gen_parsing.json", "parsing");
    let body = json!({
        "mode": "single", "domains": ["medium"], "target": "medium",
        "model": {"dim": 6, "rounds": 1, "intra": {"enabled": true, "use_adjacency": false}}
    });
    let a = train(&config(dir.path(), "a", &data, body.clone()), &opts()).unwrap();
    let b = train(&config(dir.path(), "b", &data, body), &opts()).unwrap();
    assert_eq!(a.manifest.sha256, b.manifest.sha256);
    assert_eq!(a.log, b.log);
}

#[test]
fn panoptic_mode_reports_pq() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "gen_panoptic.json", "panoptic");
    let cfg = config(
        dir.path(),
        "pan",
        &data,
        json!({
            "mode": "panoptic",
            "paths": {"data": data, "checkpoints": dir.path().join("ck")},
            "model": {"dim": 6, "rounds": 1, "transfer": {"scheme": "attention"}},
            "panoptic": {"domain": "panoptic", "stuff": ["sky", "grass", "road"], "things": ["person", "car", "dog"]}
        }),
    );
    let out = train(&cfg, &opts()).unwrap();
    assert!(matches!(out.model, AnyModel::Panoptic(_)));
    let report = evaluate(&out.checkpoint, &data, None, 1).unwrap();
    let pan = report.panoptic.expect("panoptic summary");
    if let Some(pq) = pan.pq {
        assert!((0.0..=1.0).contains(&pq));
    }
    assert_eq!(report.domains["panoptic"].labels.len(), 6);
}

#[test]
fn unknown_domain_and_damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "gen_parsing.json", "parsing");
    let cfg = config(
        dir.path(),
        "single",
        &data,
        json!({"mode": "single", "domains": ["fine"], "target": "fine"}),
    );
    let out = train(&cfg, &opts()).unwrap();

    let missing = evaluate(&out.checkpoint, &data, Some(&["coarse".to_string()]), 1);
    assert!(matches!(missing, Err(Error::Config(_))), "{missing:?}");

    let bytes = fs::read(&out.checkpoint).unwrap();
    fs::write(&out.checkpoint, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(AnyModel::load(&out.checkpoint), Err(Error::Integrity(_))));

    fs::write(&out.checkpoint, &bytes).unwrap();
    let mp = manifest_path(&out.checkpoint);
    let mut manifest: Value = serde_json::from_str(&fs::read_to_string(&mp).unwrap()).unwrap();
    manifest["model"] = json!({"kind": "parsing", "dim": "wide"});
    fs::write(&mp, manifest.to_string()).unwrap();
    assert!(matches!(AnyModel::load(&out.checkpoint), Err(Error::Integrity(_))));
}

#[test]
fn validation_catches_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "gen_parsing.json", "parsing");
    let no_target = config(
        dir.path(),
        "nt",
        &data,
        json!({"mode": "transfer_pretrain", "domains": ["coarse", "fine"]}),
    );
    assert!(matches!(no_target.validate(), Err(Error::Config(_))));

    let semantic_without_embeddings = config(
        dir.path(),
        "se",
        &data,
        json!({
            "mode": "universal", "domains": ["coarse", "fine"],
            "paths": {"taxonomy": root().join("assets/human_body_taxonomy.json"), "data": data, "checkpoints": dir.path().join("ck")},
            "model": {"dim": 6, "rounds": 1, "transfer": {"scheme": "semantic"}}
        }),
    );
    assert!(semantic_without_embeddings.validate().is_err());

    let incremental_without_base = config(
        dir.path(),
        "inc",
        &data,
        json!({"mode": "incremental", "target": "fine"}),
    );
    assert!(train(&incremental_without_base, &opts()).is_err());
}
