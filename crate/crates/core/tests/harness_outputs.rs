mod common;

use std::fs;
use std::path::Path;

use robustfed::harness::{
    emit_outputs, evaluate_accuracy, prepare_data, run_experiment, ExperimentConfig, RunKind,
    RunOptions, METRICS_DIR, METRICS_HEADER, SUMMARY_FILE,
};
use robustfed::{CostModel, Family, LabeledDataset, Matrix, WeightVector};

const CLASSIFICATION: &str = r#"
seed = 11

[dataset]
source = "synthetic-classification"
samples = 240
features = 4
classes = 3
separation = 3.0

[partition]
scheme = "label-shard"
num_users = 4
shards_per_user = 2

[model]
family = "logistic-multiclass"
classes = 3

[federation]
rounds = 12
local_epochs = 2
tolerance = 1e-12

[federation.local]
step_size = 0.2
tolerance = 1e-12

[sweep]
p = [1, 2]
epsilon = [0.01, 0.1, 0.2]
delta = "epsilon"

[output]
checkpoints = [4, 8, 12]
"#;

fn config(overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml(CLASSIFICATION, &overrides, Path::new(".")).unwrap()
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn sweep_writes_one_metrics_file_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let records = run_experiment(&config(&[]), dir.path(), RunOptions::default()).unwrap();
    // six cells plus the centralized baseline
    assert_eq!(records.len(), 2 * 3 + 1);
    assert_eq!(records.iter().filter(|r| r.kind == RunKind::Centralized).count(), 1);
    for r in &records {
        assert!(r.error.is_none(), "{}: {:?}", r.id, r.error);
        let text = read(&dir.path().join(METRICS_DIR).join(format!("{}.csv", r.id)));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_HEADER));
        let rounds: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(rounds.windows(2).all(|w| w[0] < w[1]));
        for m in &r.metrics {
            let acc = m.accuracy.unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&dir.path().join("manifest.json"))).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), records.len());
    assert_eq!(manifest["config_hash"].as_str().unwrap(), records[0].config_hash);
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = config(&["sweep.p=[2]"]);
    run_experiment(&cfg, a.path(), RunOptions::default()).unwrap();
    run_experiment(&cfg, b.path(), RunOptions { jobs: 2 }).unwrap();
    let names: Vec<_> = fs::read_dir(a.path().join(METRICS_DIR)).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 4);
    for name in names {
        let x = fs::read(a.path().join(METRICS_DIR).join(&name)).unwrap();
        let y = fs::read(b.path().join(METRICS_DIR).join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    assert_eq!(read(&a.path().join(SUMMARY_FILE)), read(&b.path().join(SUMMARY_FILE)));
}

#[test]
fn zero_records_write_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let files = emit_outputs(&[], &config(&[]), dir.path()).unwrap();
    assert!(files.metrics.is_empty() && files.summary.is_none());
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec![std::ffi::OsString::from("manifest.json")]);
}

#[test]
fn summary_cells_match_the_metrics_files() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config(&[]), dir.path(), RunOptions::default()).unwrap();
    let summary = read(&dir.path().join(SUMMARY_FILE));
    let mut rows = summary.lines();
    let ids: Vec<&str> = rows.next().unwrap().split(',').skip(1).collect();
    assert!(ids.contains(&"L2_eps0.1_delta0.1"));
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        let round = fields[0];
        for (id, value) in ids.iter().zip(&fields[1..]) {
            let metrics = read(&dir.path().join(METRICS_DIR).join(format!("{id}.csv")));
            let line = metrics.lines().find(|l| l.split(',').next() == Some(round)).unwrap();
            assert_eq!(line.rsplit(',').next().unwrap(), *value, "{id} at round {round}");
        }
    }
}

#[test]
fn unwritable_output_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let err = run_experiment(&config(&[]), &blocker.join("out"), RunOptions::default()).unwrap_err();
    assert!(matches!(err, robustfed::Error::Io { .. }), "{err}");
}

#[test]
fn a_diverging_cell_does_not_stop_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&["sweep.p=[2]", "sweep.epsilon=[0.1, 1e6]", "federation.local.step_size=0.5"]);
    let records = run_experiment(&cfg, dir.path(), RunOptions::default()).unwrap();
    assert_eq!(records.len(), 3);
    let failed: Vec<_> = records.iter().filter(|r| r.error.is_some()).map(|r| r.id.as_str()).collect();
    assert_eq!(failed, vec!["L2_eps1000000_delta1000000"]);
    let manifest = read(&dir.path().join("manifest.json"));
    assert!(manifest.contains("\"error\": \""));
}

/// Argmax of the score matrix via whole-matrix operations.
fn matrix_accuracy(model: &CostModel, w: &WeightVector, data: &LabeledDataset) -> f64 {
    let classes = model.classes().unwrap();
    let weights = Matrix::from_column_slice(model.features(), classes, w.as_vector().as_slice());
    let scores = data.features() * weights;
    let hits = scores
        .row_iter()
        .zip(data.labels())
        .filter(|(row, &y)| row.transpose().argmax().0 == y as usize)
        .count();
    hits as f64 / data.num_samples() as f64
}

#[test]
fn accuracy_matches_a_matrix_implementation() {
    let mut r = common::rng(31);
    let family = Family::LogisticMulticlass { classes: 4 };
    let model = CostModel::new(family, 5).unwrap();
    for _ in 0..20 {
        let data = common::random_dataset(&mut r, family, 100, 5);
        let w = common::random_weights(&mut r, model.param_dim(), 1.0);
        assert_eq!(evaluate_accuracy(&model, &w, &data).unwrap(), matrix_accuracy(&model, &w, &data));
    }
}

#[test]
fn trained_accuracy_beats_the_class_prior() {
    let cfg = config(&["sweep.p=[2]", "sweep.epsilon=[0.1]", "federation.rounds=60"]);
    let data = prepare_data(&cfg).unwrap();
    let mut counts = [0usize; 3];
    for &y in data.evaluation.labels() {
        counts[y as usize] += 1;
    }
    let prior = *counts.iter().max().unwrap() as f64 / data.evaluation.num_samples() as f64;
    let dir = tempfile::tempdir().unwrap();
    let records = run_experiment(&cfg, dir.path(), RunOptions::default()).unwrap();
    for r in records {
        assert!(r.final_accuracy.unwrap() > prior, "{}: {:?} vs {prior}", r.id, r.final_accuracy);
    }
}
