use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PartitionPlan, PartitionScheme};
use crate::error::{Error, Result};
use crate::federation::{Algorithm, Architecture};
use crate::problem::Family;
use crate::solvers::SolverConfig;
use crate::uncertainty::{dual_norm_order, ProtectionForm};

/// A full experiment: data, partition, model, federation settings and the
/// `(p, ε, δ)` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub model: Family,
    pub federation: FederationSettings,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub baselines: Baselines,
    #[serde(default)]
    pub evaluation: Evaluation,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    /// Fraction of samples kept, chosen with the experiment seed.
    #[serde(default = "one")]
    pub subsample: f64,
    /// Append a constant-one feature.
    #[serde(default)]
    pub bias: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
    Csv {
        path: PathBuf,
        test_path: Option<PathBuf>,
    },
    /// Per-user regression data; the partition section only supplies the
    /// user count.
    SyntheticQuadratic {
        dim: usize,
        heterogeneity: f64,
        samples_per_user: Option<usize>,
    },
    SyntheticClassification {
        samples: usize,
        features: usize,
        classes: usize,
        separation: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    pub num_users: usize,
    #[serde(default = "two")]
    pub shards_per_user: usize,
    #[serde(default = "half")]
    pub concentration: f64,
    /// Defaults to the experiment seed.
    pub seed: Option<u64>,
}

fn two() -> usize {
    2
}

fn half() -> f64 {
    0.5
}

impl PartitionConfig {
    pub fn plan(&self, experiment_seed: u64) -> PartitionPlan {
        PartitionPlan {
            scheme: self.scheme,
            num_users: self.num_users,
            shards_per_user: self.shards_per_user,
            concentration: self.concentration,
            seed: self.seed.unwrap_or(experiment_seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSettings {
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub algorithm: Algorithm,
    pub rounds: usize,
    #[serde(default = "five")]
    pub local_epochs: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub form: ProtectionForm,
    #[serde(default)]
    pub local: SolverConfig,
}

fn five() -> usize {
    5
}

fn default_tolerance() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub p: Vec<f64>,
    pub epsilon: Vec<f64>,
    #[serde(default)]
    pub delta: DeltaSweep,
}

/// `δ` values: an explicit list, or `"epsilon"` to set `δ = ε` per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaSweep {
    Tied(TiedToEpsilon),
    List(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiedToEpsilon {
    Epsilon,
}

impl Default for DeltaSweep {
    fn default() -> Self {
        DeltaSweep::Tied(TiedToEpsilon::Epsilon)
    }
}

/// One grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub p: f64,
    pub epsilon: f64,
    pub delta: f64,
}

impl Cell {
    /// `L2_eps0.1_delta0.1`, `Linf_eps0.5_delta0`, …
    pub fn id(&self) -> String {
        let norm = if self.p.is_infinite() { "inf".to_string() } else { self.p.to_string() };
        format!("L{norm}_eps{}_delta{}", self.epsilon, self.delta)
    }
}

impl SweepConfig {
    /// Cells in `p`-major, then `ε`, then `δ` order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &p in &self.p {
            for &epsilon in &self.epsilon {
                match &self.delta {
                    DeltaSweep::Tied(_) => cells.push(Cell { p, epsilon, delta: epsilon }),
                    DeltaSweep::List(deltas) => {
                        cells.extend(deltas.iter().map(|&delta| Cell { p, epsilon, delta }))
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Baselines {
    pub centralized: bool,
    /// An unprotected FedAvg run alongside the sweep.
    pub fedavg: bool,
}

impl Default for Baselines {
    fn default() -> Self {
        Self { centralized: true, fedavg: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Evaluation {
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub checkpoints: Vec<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoints: vec![40, 80, 120] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub enabled: bool,
    pub grid_points: usize,
    /// Half-width of the sampling box around the centralized solution.
    pub half_width: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { enabled: false, grid_points: 64, half_width: 1.0 }
    }
}

/// Sets `key.path = value` in a TOML table. The value is parsed as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut current = table;
    for part in parents {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides and validates.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: &Path) -> Result<Self> {
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        config.validate()?;
        Ok(config)
    }

    /// Loads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, overrides, &base)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() { path.to_path_buf() } else { self.base_dir.join(path) }
    }

    fn referenced_paths(&self) -> Vec<&Path> {
        let mut paths: Vec<&Path> = Vec::new();
        match &self.dataset.source {
            DatasetSource::Idx { images, labels, test_images, test_labels } => {
                paths.extend([images.as_path(), labels.as_path()]);
                paths.extend(test_images.iter().chain(test_labels).map(PathBuf::as_path));
            }
            DatasetSource::Csv { path, test_path } => {
                paths.push(path);
                paths.extend(test_path.iter().map(PathBuf::as_path));
            }
            _ => {}
        }
        paths
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.sweep.p.is_empty() || self.sweep.epsilon.is_empty() {
            return cfg("sweep.p and sweep.epsilon must be nonempty".into());
        }
        if let DeltaSweep::List(d) = &self.sweep.delta {
            if d.is_empty() {
                return cfg("sweep.delta must be nonempty".into());
            }
        }
        for &p in &self.sweep.p {
            dual_norm_order(p).map_err(|e| Error::Config(format!("sweep.p: {e}")))?;
        }
        for cell in self.sweep.cells() {
            if !(cell.epsilon >= 0.0 && cell.delta >= 0.0) {
                return cfg(format!("cell {}: ε and δ must be nonnegative", cell.id()));
            }
        }
        let sub = self.dataset.subsample;
        if !(sub > 0.0 && sub <= 1.0) {
            return cfg(format!("dataset.subsample {sub} must lie in (0, 1]"));
        }
        if self.federation.rounds == 0 {
            return cfg("federation.rounds must be positive".into());
        }
        self.partition.plan(self.seed).validate()?;
        self.federation.local.validate()?;
        if self.evaluation.split == Split::Test {
            let has_test = match &self.dataset.source {
                DatasetSource::Idx { test_images, test_labels, .. } => {
                    test_images.is_some() && test_labels.is_some()
                }
                DatasetSource::Csv { test_path, .. } => test_path.is_some(),
                _ => false,
            };
            if !has_test {
                return cfg("evaluation.split = \"test\" needs test data paths".into());
            }
        }
        for path in self.referenced_paths() {
            let full = self.resolve(path);
            if !full.is_file() {
                return cfg(format!("dataset file {} does not exist", full.display()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the config as JSON with keys sorted at every level.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes to JSON");
        let canonical = canonical_json(&value);
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

fn canonical_json(value: &serde_json::Value) -> String {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .iter()
                .map(|k| format!("{}:{}", Value::String((*k).clone()), canonical_json(&map[*k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => {
            format!("[{}]", items.iter().map(canonical_json).collect::<Vec<_>>().join(","))
        }
        other => other.to_string(),
    }
}
