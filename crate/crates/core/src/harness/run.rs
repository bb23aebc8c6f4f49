use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::accuracy::evaluate_accuracy;
use super::config::{Cell, DatasetSource, ExperimentConfig, Split};
use super::output::{emit_outputs, prepare_output_dir};
use crate::data::{
    load_csv, load_idx, partition, signed_binary, synth_classification, synth_quadratic,
    synth_quadratic_with, with_bias,
};
use crate::diagnostics::{diagnose, sample_grid, DiagnosticsInput, DiagnosticsReport};
use crate::error::{Error, Result};
use crate::federation::{
    run_round, Algorithm, FederationConfig, FederationState, RoundRecord,
};
use crate::problem::{CostModel, Family, LabeledDataset, WeightVector};
use crate::solvers::{descend, initial_weights, DataObjective, SolverConfig};
use crate::uncertainty::ProtectionSpec;

/// Stream offset so subsampling does not reuse the initialization draws.
const SUBSAMPLE_STREAM: u64 = 0x5eed_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Upper bound on concurrently running cells; 0 uses every core.
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunKind {
    Federated,
    Centralized,
    FedavgBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_cost: f64,
    pub mean_local_cost: f64,
    pub step_norm: f64,
    pub accuracy: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub id: String,
    pub kind: RunKind,
    pub cell: Option<Cell>,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub final_accuracy: Option<f64>,
    pub converged: bool,
    pub wall_time_s: f64,
    pub diagnostics: Option<DiagnosticsReport>,
    pub diagnostics_error: Option<String>,
    pub error: Option<String>,
    #[serde(skip)]
    pub final_weights: Option<WeightVector>,
}

impl RunRecord {
    fn new(id: String, kind: RunKind, cell: Option<Cell>, config: &ExperimentConfig, hash: &str) -> Self {
        Self {
            id,
            kind,
            cell,
            config_hash: hash.to_string(),
            seed: config.seed,
            metrics: Vec::new(),
            final_accuracy: None,
            converged: false,
            wall_time_s: 0.0,
            diagnostics: None,
            diagnostics_error: None,
            error: None,
            final_weights: None,
        }
    }

    pub fn accuracy_at(&self, round: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.round == round).and_then(|m| m.accuracy)
    }
}

/// Training partition, evaluation set and the model sized to them.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub model: CostModel,
    pub partition: Vec<LabeledDataset>,
    pub pooled: LabeledDataset,
    pub evaluation: LabeledDataset,
}

fn subsample(data: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    if fraction >= 1.0 {
        return Ok(data.clone());
    }
    let keep = ((data.num_samples() as f64 * fraction).round() as usize).max(1);
    let mut idx: Vec<usize> = (0..data.num_samples()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SUBSAMPLE_STREAM));
    idx.truncate(keep);
    idx.sort_unstable();
    data.select(&idx)
}

fn finish(data: LabeledDataset, config: &ExperimentConfig) -> Result<LabeledDataset> {
    let data = if config.dataset.bias { with_bias(&data)? } else { data };
    match config.model {
        Family::LogisticBinary | Family::HingeSvm
            if data.labels().iter().all(|&y| y == 0.0 || y == 1.0) =>
        {
            signed_binary(&data)
        }
        _ => Ok(data),
    }
}

/// Loads, subsamples and partitions the configured dataset.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let seed = config.seed;
    let fraction = config.dataset.subsample;
    let users = config.partition.num_users;
    let (partition, test) = match &config.dataset.source {
        DatasetSource::SyntheticQuadratic { dim, heterogeneity, samples_per_user } => {
            let synth = match samples_per_user {
                Some(m) => synth_quadratic_with(users, *dim, *heterogeneity, *m, seed)?,
                None => synth_quadratic(users, *dim, *heterogeneity, seed)?,
            };
            let parts = synth
                .partition
                .iter()
                .enumerate()
                .map(|(n, d)| subsample(d, fraction, seed.wrapping_add(n as u64)).and_then(|d| finish(d, config)))
                .collect::<Result<Vec<_>>>()?;
            (parts, None)
        }
        source => {
            let (train, test) = match source {
                DatasetSource::Idx { images, labels, test_images, test_labels } => {
                    let train = load_idx(&config.resolve(images), &config.resolve(labels))?;
                    let test = match (test_images, test_labels) {
                        (Some(i), Some(l)) => Some(load_idx(&config.resolve(i), &config.resolve(l))?),
                        _ => None,
                    };
                    (train, test)
                }
                DatasetSource::Csv { path, test_path } => {
                    let test = test_path.as_ref().map(|p| load_csv(&config.resolve(p))).transpose()?;
                    (load_csv(&config.resolve(path))?, test)
                }
                DatasetSource::SyntheticClassification { samples, features, classes, separation } => {
                    (synth_classification(*samples, *features, *classes, *separation, seed)?, None)
                }
                DatasetSource::SyntheticQuadratic { .. } => unreachable!("handled above"),
            };
            let train = finish(subsample(&train, fraction, seed)?, config)?;
            let parts = partition(&train, &config.partition.plan(seed))?;
            (parts, test.map(|t| finish(t, config)).transpose()?)
        }
    };
    let pooled = LabeledDataset::concat(&partition)?;
    let model = CostModel::new(config.model, pooled.dim())?;
    let evaluation = match config.evaluation.split {
        Split::Train => pooled.clone(),
        Split::Test => test.ok_or_else(|| Error::Config("no test split available".into()))?,
    };
    Ok(PreparedData { model, partition, pooled, evaluation })
}

fn accuracy(model: &CostModel, w: &WeightVector, eval: &LabeledDataset) -> Result<Option<f64>> {
    if model.family() == Family::LinearRegression {
        Ok(None)
    } else {
        evaluate_accuracy(model, w, eval).map(Some)
    }
}

fn metrics_from(record: &RoundRecord, acc: Option<f64>, wall_time_s: f64) -> RoundMetrics {
    RoundMetrics {
        round: record.round,
        global_cost: record.global_cost,
        mean_local_cost: record.mean_local_cost(),
        step_norm: record.step_norm,
        accuracy: acc,
        wall_time_s,
    }
}

/// The federation settings for one cell, every user sharing the same spec.
pub fn federation_config(config: &ExperimentConfig, algorithm: Algorithm, spec: ProtectionSpec) -> FederationConfig {
    let f = &config.federation;
    FederationConfig {
        num_users: config.partition.num_users,
        architecture: f.architecture,
        algorithm,
        rounds: f.rounds,
        local: SolverConfig { seed: config.seed, ..f.local },
        local_epochs: f.local_epochs,
        protection: vec![spec; config.partition.num_users],
        form: f.form,
        tolerance: f.tolerance,
    }
}

fn run_federated(
    record: &mut RunRecord,
    fed: &FederationConfig,
    data: &PreparedData,
) -> Result<()> {
    let model = &data.model;
    let start = initial_weights(model.param_dim(), fed.local.seed);
    let clock = Instant::now();
    let mut state = FederationState::initial(model, &data.partition, start)?;
    let acc = accuracy(model, &state.aggregate, &data.evaluation)?;
    record.metrics.push(metrics_from(state.last_record(), acc, 0.0));
    record.final_weights = Some(state.aggregate.clone());
    while state.round < fed.rounds && !state.converged {
        let tick = Instant::now();
        state = run_round(state, fed, model, &data.partition)?;
        // keep only the current round; the metrics already hold the rest
        state.history.drain(..state.history.len() - 1);
        state.messages.clear();
        let acc = accuracy(model, &state.aggregate, &data.evaluation)?;
        record.metrics.push(metrics_from(state.last_record(), acc, tick.elapsed().as_secs_f64()));
        record.final_weights = Some(state.aggregate.clone());
        record.final_accuracy = acc;
        record.wall_time_s = clock.elapsed().as_secs_f64();
    }
    record.converged = state.converged;
    Ok(())
}

/// Gradient descent on the pooled data with `rounds × local_epochs`
/// iterations, logged every `local_epochs` iterations so each row spends
/// the same number of gradient steps as a federated round.
fn run_centralized(record: &mut RunRecord, config: &ExperimentConfig, data: &PreparedData) -> Result<()> {
    let model = &data.model;
    let f = &config.federation;
    let solver = SolverConfig {
        max_iters: f.rounds * f.local_epochs,
        seed: config.seed,
        ..f.local
    };
    let clock = Instant::now();
    let start = initial_weights(model.param_dim(), config.seed);
    let trace = descend(&DataObjective { model, data: &data.pooled }, start, &solver)?;
    let elapsed = clock.elapsed().as_secs_f64();
    let last = trace.iterates.len() - 1;
    let rows = last.div_ceil(f.local_epochs);
    let mut prev = 0;
    for round in 0..=rows {
        let idx = (round * f.local_epochs).min(last);
        let w = &trace.iterates[idx];
        let cost = model.global_cost(w, &data.partition)?;
        let acc = accuracy(model, w, &data.evaluation)?;
        let step = (w.as_vector() - trace.iterates[prev].as_vector()).norm();
        record.metrics.push(RoundMetrics {
            round,
            global_cost: cost,
            mean_local_cost: cost,
            step_norm: step,
            accuracy: acc,
            wall_time_s: if round == 0 { 0.0 } else { elapsed / rows as f64 },
        });
        record.final_accuracy = acc;
        prev = idx;
    }
    record.converged = trace.converged;
    record.wall_time_s = elapsed;
    record.final_weights = Some(trace.last().clone());
    Ok(())
}

fn attach_diagnostics(
    record: &mut RunRecord,
    config: &ExperimentConfig,
    data: &PreparedData,
    spec: ProtectionSpec,
    centralized: Option<&WeightVector>,
) {
    let Some(federated) = record.final_weights.as_ref() else { return };
    let center = centralized.cloned().unwrap_or_else(|| WeightVector::zeros(data.model.param_dim()));
    let d = &config.diagnostics;
    let grid = sample_grid(&center, d.grid_points, d.half_width, config.seed);
    let specs = vec![spec; data.partition.len()];
    let input = DiagnosticsInput {
        model: &data.model,
        partition: &data.partition,
        specs: &specs,
        form: config.federation.form,
        grid: &grid,
        centralized,
        federated: Some(federated),
    };
    match diagnose(&input) {
        Ok(report) => record.diagnostics = Some(report),
        Err(e) => record.diagnostics_error = Some(e.to_string()),
    }
}

/// Runs every configured run on prepared data without writing files.
pub fn run_records(config: &ExperimentConfig, data: &PreparedData, options: RunOptions) -> Result<Vec<RunRecord>> {
    let hash = config.hash();
    let mut records = Vec::new();
    let mut centralized_weights = None;
    if config.baselines.centralized || config.diagnostics.enabled {
        let mut record = RunRecord::new("centralized".into(), RunKind::Centralized, None, config, &hash);
        if let Err(e) = run_centralized(&mut record, config, data) {
            record.error = Some(e.to_string());
        }
        centralized_weights = record.final_weights.clone().filter(|_| record.error.is_none());
        if config.baselines.centralized {
            records.push(record);
        }
    }

    let mut jobs: Vec<(String, RunKind, Option<Cell>, Algorithm, ProtectionSpec)> = Vec::new();
    if config.baselines.fedavg {
        jobs.push(("fedavg".into(), RunKind::FedavgBaseline, None, Algorithm::FedAvg, ProtectionSpec::none()));
    }
    for cell in config.sweep.cells() {
        let spec = ProtectionSpec::new(cell.p, cell.epsilon, cell.delta)?;
        jobs.push((cell.id(), RunKind::Federated, Some(cell), config.federation.algorithm, spec));
    }

    let run_job = |(id, kind, cell, algorithm, spec): &(String, RunKind, Option<Cell>, Algorithm, ProtectionSpec)| {
        let mut record = RunRecord::new(id.clone(), *kind, *cell, config, &hash);
        let fed = federation_config(config, *algorithm, *spec);
        if let Err(e) = run_federated(&mut record, &fed, data) {
            record.error = Some(e.to_string());
        }
        if config.diagnostics.enabled && data.model.is_smooth() && record.error.is_none() {
            attach_diagnostics(&mut record, config, data, *spec, centralized_weights.as_ref());
        }
        record
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells: Vec<RunRecord> = pool.install(|| jobs.par_iter().map(run_job).collect());
    records.extend(cells);
    Ok(records)
}

/// Runs the sweep and writes the output files into `out_dir`.
///
/// The directory is checked for writability before anything runs. A
/// failing cell records its error and the other cells still execute.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path, options: RunOptions) -> Result<Vec<RunRecord>> {
    prepare_output_dir(out_dir)?;
    let data = prepare_data(config)?;
    let records = run_records(config, &data, options)?;
    emit_outputs(&records, config, out_dir)?;
    Ok(records)
}
