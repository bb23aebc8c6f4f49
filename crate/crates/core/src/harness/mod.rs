//! Experiment configs, sweeps over `(p, ε, δ)` and their output files.

mod accuracy;
mod config;
mod output;
mod run;

pub use accuracy::evaluate_accuracy;
pub use config::{
    apply_override, Baselines, Cell, DatasetConfig, DatasetSource, DeltaSweep, DiagnosticsConfig,
    Evaluation, ExperimentConfig, FederationSettings, OutputConfig, PartitionConfig, Split,
    SweepConfig, TiedToEpsilon,
};
pub use output::{
    emit_outputs, metrics_csv, prepare_output_dir, summary_csv, OutputFiles, COST_SUMMARY_FILE,
    MANIFEST_FILE, METRICS_DIR, METRICS_HEADER, SUMMARY_FILE,
};
pub use run::{
    federation_config, prepare_data, run_experiment, run_records, PreparedData, RoundMetrics,
    RunKind, RunOptions, RunRecord,
};
