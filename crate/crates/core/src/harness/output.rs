use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::run::{RoundMetrics, RunRecord};
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "round,global_cost,mean_local_cost,step_norm,accuracy";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const COST_SUMMARY_FILE: &str = "cost_summary.csv";
pub const METRICS_DIR: &str = "metrics";

/// Creates the directory and proves it writable.
pub fn prepare_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-round metrics as CSV text.
pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.round,
            m.global_cost,
            m.mean_local_cost,
            m.step_norm,
            opt(m.accuracy)
        ));
    }
    out
}

/// Value at a checkpoint. A run that stopped early on convergence keeps its
/// last value; a failed run has no value past its last completed round.
fn at_checkpoint(record: &RunRecord, round: usize, pick: fn(&RoundMetrics) -> Option<f64>) -> Option<f64> {
    if let Some(m) = record.metrics.iter().find(|m| m.round == round) {
        return pick(m);
    }
    let last = record.metrics.last()?;
    if last.round < round && record.error.is_none() { pick(last) } else { None }
}

/// One row per checkpoint round, one column per run.
pub fn summary_csv(records: &[RunRecord], checkpoints: &[usize], pick: fn(&RoundMetrics) -> Option<f64>) -> String {
    let mut out = String::from("round");
    for r in records {
        out.push(',');
        out.push_str(&r.id);
    }
    out.push('\n');
    for &round in checkpoints {
        out.push_str(&round.to_string());
        for r in records {
            out.push(',');
            out.push_str(&opt(at_checkpoint(r, round, pick)));
        }
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct ManifestRun<'a> {
    id: &'a str,
    kind: super::run::RunKind,
    cell: Option<super::config::Cell>,
    metrics_file: Option<String>,
    rounds_completed: usize,
    converged: bool,
    final_accuracy: Option<f64>,
    final_cost: Option<f64>,
    wall_time_s: f64,
    error: Option<&'a str>,
    diagnostics: Option<&'a crate::diagnostics::DiagnosticsReport>,
    diagnostics_error: Option<&'a str>,
}

#[derive(Serialize)]
struct Versions {
    robustfed: &'static str,
    manifest_format: u32,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: String,
    seed: u64,
    versions: Versions,
    checkpoints: &'a [usize],
    config: &'a ExperimentConfig,
    runs: Vec<ManifestRun<'a>>,
}

/// Files written by [`emit_outputs`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputFiles {
    pub manifest: PathBuf,
    pub summary: Option<PathBuf>,
    pub cost_summary: Option<PathBuf>,
    pub metrics: Vec<PathBuf>,
}

/// Writes `metrics/<id>.csv` per run, the checkpoint summaries and the
/// manifest. Without records only the manifest is written.
pub fn emit_outputs(records: &[RunRecord], config: &ExperimentConfig, out_dir: &Path) -> Result<OutputFiles> {
    prepare_output_dir(out_dir)?;
    let mut files = OutputFiles {
        manifest: out_dir.join(MANIFEST_FILE),
        summary: None,
        cost_summary: None,
        metrics: Vec::new(),
    };
    let checkpoints = &config.output.checkpoints;
    let mut runs = Vec::with_capacity(records.len());
    if !records.is_empty() {
        let metrics_dir = out_dir.join(METRICS_DIR);
        fs::create_dir_all(&metrics_dir).map_err(|e| Error::io(&metrics_dir, e))?;
        for r in records {
            let name = format!("{}.csv", r.id);
            let path = metrics_dir.join(&name);
            write(&path, &metrics_csv(&r.metrics))?;
            files.metrics.push(path);
            runs.push(ManifestRun {
                id: &r.id,
                kind: r.kind,
                cell: r.cell,
                metrics_file: Some(format!("{METRICS_DIR}/{name}")),
                rounds_completed: r.metrics.last().map_or(0, |m| m.round),
                converged: r.converged,
                final_accuracy: r.final_accuracy,
                final_cost: r.metrics.last().map(|m| m.global_cost),
                wall_time_s: r.wall_time_s,
                error: r.error.as_deref(),
                diagnostics: r.diagnostics.as_ref(),
                diagnostics_error: r.diagnostics_error.as_deref(),
            });
        }
        let summary = out_dir.join(SUMMARY_FILE);
        write(&summary, &summary_csv(records, checkpoints, |m| m.accuracy))?;
        files.summary = Some(summary);
        let costs = out_dir.join(COST_SUMMARY_FILE);
        write(&costs, &summary_csv(records, checkpoints, |m| Some(m.global_cost)))?;
        files.cost_summary = Some(costs);
    }
    let manifest = Manifest {
        config_hash: config.hash(),
        seed: config.seed,
        versions: Versions { robustfed: env!("CARGO_PKG_VERSION"), manifest_format: 1 },
        checkpoints,
        config,
        runs,
    };
    write(&files.manifest, &serde_json::to_string_pretty(&manifest)?)?;
    Ok(files)
}
