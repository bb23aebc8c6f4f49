//! Dataset loading, synthetic instances and per-user partitioning.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use nalgebra::Cholesky;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{LabeledDataset, Matrix, Vector, WeightVector};

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|ext| ext == "gz");
    if gz {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        file.read_to_end(&mut bytes)
    }
    .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn format_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), offset: offset as u64, message: message.into() }
}

/// Decoded IDX header with the payload length it implies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IdxHeader {
    pub magic: u32,
    pub type_code: u8,
    pub dims: Vec<u32>,
    pub header_bytes: usize,
    pub payload_bytes: usize,
    pub file_bytes: usize,
}

impl IdxHeader {
    pub fn items(&self) -> usize {
        self.dims.first().copied().unwrap_or(0) as usize
    }

    /// Product of all dimensions after the first.
    pub fn item_len(&self) -> usize {
        self.dims.iter().skip(1).map(|&d| d as usize).product()
    }
}

fn parse_idx_header(path: &Path, bytes: &[u8]) -> Result<IdxHeader> {
    if bytes.len() < 4 {
        return Err(format_error(path, bytes.len(), "file ends inside the magic number"));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_error(path, 0, format!("bad magic 0x{magic:08x}")));
    }
    let type_code = bytes[2];
    let ndim = bytes[3] as usize;
    let header_bytes = 4 + 4 * ndim;
    if bytes.len() < header_bytes {
        return Err(format_error(path, bytes.len(), "file ends inside the dimension table"));
    }
    let dims: Vec<u32> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
        })
        .collect();
    let payload_bytes = dims.iter().map(|&d| d as usize).product::<usize>();
    Ok(IdxHeader { magic, type_code, dims, header_bytes, payload_bytes, file_bytes: bytes.len() })
}

/// Reads and decodes only the header of an IDX file (`.gz` accepted).
pub fn inspect_idx_header(path: &Path) -> Result<IdxHeader> {
    let bytes = read_bytes(path)?;
    parse_idx_header(path, &bytes)
}

fn checked_idx(path: &Path, bytes: &[u8], magic: u32) -> Result<IdxHeader> {
    let header = parse_idx_header(path, bytes)?;
    if header.magic != magic {
        return Err(format_error(
            path,
            0,
            format!("bad magic 0x{:08x}, expected 0x{magic:08x}", header.magic),
        ));
    }
    let expected = header.header_bytes + header.payload_bytes;
    if bytes.len() < expected {
        return Err(format_error(
            path,
            bytes.len(),
            format!("truncated payload: {expected} bytes declared, {} present", bytes.len()),
        ));
    }
    Ok(header)
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]` and each
/// image is flattened row-major; labels are stored as class indices.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = read_bytes(images_path)?;
    let label_bytes = read_bytes(labels_path)?;
    let images = checked_idx(images_path, &image_bytes, IDX_IMAGES_MAGIC)?;
    let labels = checked_idx(labels_path, &label_bytes, IDX_LABELS_MAGIC)?;
    if images.items() != labels.items() {
        return Err(format_error(
            labels_path,
            4,
            format!("{} labels for {} images", labels.items(), images.items()),
        ));
    }
    if images.items() == 0 {
        return Err(format_error(images_path, 4, "no images"));
    }
    let len = images.item_len();
    let pixels = &image_bytes[images.header_bytes..images.header_bytes + images.payload_bytes];
    let features = Matrix::from_fn(images.items(), len, |i, j| f64::from(pixels[i * len + j]) / 255.0);
    let label_values = label_bytes[labels.header_bytes..labels.header_bytes + labels.payload_bytes]
        .iter()
        .map(|&b| f64::from(b))
        .collect();
    LabeledDataset::new(features, label_values)
}

/// Loads a CSV file with a header row; the column named `label` holds the
/// labels and every other column is a numeric feature.
pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Config(format!("{}: no `label` column", path.display())))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = Vec::with_capacity(record.len().saturating_sub(1));
        for (col, field) in record.iter().enumerate() {
            let value: f64 = field.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "{}: row {}, column `{}`: `{field}` is not a number",
                    path.display(),
                    line + 2,
                    &headers[col]
                ))
            })?;
            if col == label_col {
                labels.push(value);
            } else {
                row.push(value);
            }
        }
        rows.push(row);
    }
    LabeledDataset::from_rows(&rows, labels)
}

/// Appends a constant-one feature column.
pub fn with_bias(data: &LabeledDataset) -> Result<LabeledDataset> {
    let x = data.features();
    let features = x.clone().insert_column(x.ncols(), 1.0);
    LabeledDataset::new(features, data.labels().to_vec())
}

/// Maps class indices `{0, 1}` to `{−1, +1}`.
pub fn signed_binary(data: &LabeledDataset) -> Result<LabeledDataset> {
    let classes = data.class_labels(2)?;
    let labels = classes.iter().map(|&c| if c == 0 { -1.0 } else { 1.0 }).collect();
    LabeledDataset::new(data.features().clone(), labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    IidUniform,
    LabelShard,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionPlan {
    pub scheme: PartitionScheme,
    pub num_users: usize,
    #[serde(default = "default_shards")]
    pub shards_per_user: usize,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_shards() -> usize {
    2
}

fn default_concentration() -> f64 {
    0.5
}

const DIRICHLET_ATTEMPTS: usize = 100;

impl PartitionPlan {
    pub fn iid(num_users: usize, seed: u64) -> Self {
        Self {
            scheme: PartitionScheme::IidUniform,
            num_users,
            shards_per_user: default_shards(),
            concentration: default_concentration(),
            seed,
        }
    }

    pub fn label_shard(num_users: usize, shards_per_user: usize, seed: u64) -> Self {
        Self { scheme: PartitionScheme::LabelShard, shards_per_user, ..Self::iid(num_users, seed) }
    }

    pub fn dirichlet(num_users: usize, concentration: f64, seed: u64) -> Self {
        Self { scheme: PartitionScheme::Dirichlet, concentration, ..Self::iid(num_users, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 {
            return Err(Error::Argument("partition needs at least one user".into()));
        }
        if self.shards_per_user == 0 {
            return Err(Error::Argument("shards_per_user must be positive".into()));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(Error::Argument("Dirichlet concentration must be positive".into()));
        }
        Ok(())
    }
}

/// Splits `0..len` into `parts` contiguous ranges whose sizes differ by at
/// most one.
fn even_bounds(len: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts).map(|i| (i * len / parts, (i + 1) * len / parts)).collect()
}

/// Sample indices per user. Each list is sorted ascending.
pub fn partition_indices(labels: &[f64], plan: &PartitionPlan) -> Result<Vec<Vec<usize>>> {
    plan.validate()?;
    let m = labels.len();
    let n = plan.num_users;
    if n > m {
        return Err(Error::Argument(format!("{n} users but only {m} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut users: Vec<Vec<usize>> = match plan.scheme {
        PartitionScheme::IidUniform => {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            even_bounds(m, n).into_iter().map(|(a, b)| order[a..b].to_vec()).collect()
        }
        PartitionScheme::LabelShard => {
            let shards = n * plan.shards_per_user;
            if shards > m {
                return Err(Error::Argument(format!("{shards} shards but only {m} samples")));
            }
            let mut by_label: Vec<usize> = (0..m).collect();
            by_label.sort_by(|&a, &b| labels[a].total_cmp(&labels[b]).then(a.cmp(&b)));
            let bounds = even_bounds(m, shards);
            let mut order: Vec<usize> = (0..shards).collect();
            order.shuffle(&mut rng);
            order
                .chunks(plan.shards_per_user)
                .map(|chunk| {
                    chunk
                        .iter()
                        .flat_map(|&s| by_label[bounds[s].0..bounds[s].1].iter().copied())
                        .collect()
                })
                .collect()
        }
        PartitionScheme::Dirichlet => dirichlet_split(labels, n, plan.concentration, &mut rng)?,
    };
    for user in &mut users {
        user.sort_unstable();
    }
    Ok(users)
}

fn dirichlet_split(
    labels: &[f64],
    n: usize,
    concentration: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut classes: Vec<f64> = labels.to_vec();
    classes.sort_by(f64::total_cmp);
    classes.dedup();
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::Argument(format!("Dirichlet concentration: {e}")))?;
    for _ in 0..DIRICHLET_ATTEMPTS {
        let mut users = vec![Vec::new(); n];
        for &class in &classes {
            let mut members: Vec<usize> =
                (0..labels.len()).filter(|&i| labels[i] == class).collect();
            members.shuffle(rng);
            let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            let mut cumulative = 0.0;
            let mut start = 0;
            for (u, d) in draws.iter().enumerate() {
                cumulative += d / total;
                let end = if u + 1 == n {
                    members.len()
                } else {
                    ((cumulative * members.len() as f64).round() as usize).clamp(start, members.len())
                };
                users[u].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if users.iter().all(|u| !u.is_empty()) {
            return Ok(users);
        }
    }
    Err(Error::Argument(format!(
        "Dirichlet draws left a user empty in {DIRICHLET_ATTEMPTS} attempts; raise the concentration"
    )))
}

/// Splits a dataset into per-user datasets.
pub fn partition(data: &LabeledDataset, plan: &PartitionPlan) -> Result<Vec<LabeledDataset>> {
    partition_indices(data.labels(), plan)?
        .iter()
        .map(|idx| data.select(idx))
        .collect()
}

/// A linear-regression federation with known optima.
#[derive(Debug, Clone)]
pub struct SynthQuadratic {
    pub partition: Vec<LabeledDataset>,
    /// Least-squares optimum of each user's own data.
    pub user_optima: Vec<WeightVector>,
    /// Least-squares optimum of the pooled data.
    pub pooled_optimum: WeightVector,
}

pub const SYNTH_NOISE: f64 = 0.1;

/// `synth_quadratic_with` using `max(40, 2·dim)` samples per user.
pub fn synth_quadratic(num_users: usize, dim: usize, heterogeneity: f64, seed: u64) -> Result<SynthQuadratic> {
    synth_quadratic_with(num_users, dim, heterogeneity, (2 * dim).max(40), seed)
}

/// User `n` draws Gaussian features and labels `y = X(w₀ + h·zₙ) + noise`,
/// with `w₀, zₙ` standard normal and `h` the heterogeneity.
pub fn synth_quadratic_with(
    num_users: usize,
    dim: usize,
    heterogeneity: f64,
    samples_per_user: usize,
    seed: u64,
) -> Result<SynthQuadratic> {
    if dim == 0 || num_users == 0 {
        return Err(Error::Argument("synth_quadratic needs dim ≥ 1 and at least one user".into()));
    }
    if samples_per_user < dim {
        return Err(Error::Argument("each user needs at least dim samples".into()));
    }
    if !(heterogeneity >= 0.0) {
        return Err(Error::Argument("heterogeneity must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let base = Vector::from_fn(dim, |_, _| normal());
    let mut partition = Vec::with_capacity(num_users);
    for _ in 0..num_users {
        let x = Matrix::from_fn(samples_per_user, dim, |_, _| normal());
        let shift = Vector::from_fn(dim, |_, _| normal());
        let w = &base + shift * heterogeneity;
        let clean = &x * w;
        let y: Vec<f64> = clean.iter().map(|v| v + SYNTH_NOISE * normal()).collect();
        partition.push(LabeledDataset::new(x, y)?);
    }
    let user_optima = partition.iter().map(least_squares).collect::<Result<Vec<_>>>()?;
    let pooled_optimum = least_squares(&LabeledDataset::concat(&partition)?)?;
    Ok(SynthQuadratic { partition, user_optima, pooled_optimum })
}

/// Normal-equation solution of `min ½‖Xw − y‖²`.
pub fn least_squares(data: &LabeledDataset) -> Result<WeightVector> {
    let x = data.features();
    let y = Vector::from_column_slice(data.labels());
    let gram = x.transpose() * x;
    let rhs = x.transpose() * y;
    let chol = Cholesky::new(gram).ok_or_else(|| Error::numeric("design matrix is rank deficient"))?;
    Ok(WeightVector::from(chol.solve(&rhs)))
}

/// Gaussian clusters, one per class, with centers `separation · zₖ`.
/// Labels are class indices; samples are interleaved across classes.
pub fn synth_classification(
    num_samples: usize,
    features: usize,
    classes: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || features == 0 || num_samples == 0 {
        return Err(Error::Argument("need ≥ 2 classes, ≥ 1 feature, ≥ 1 sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let centers = Matrix::from_fn(classes, features, |_, _| separation * normal());
    let labels: Vec<f64> = (0..num_samples).map(|i| (i % classes) as f64).collect();
    let x = Matrix::from_fn(num_samples, features, |i, j| centers[(i % classes, j)] + normal());
    LabeledDataset::new(x, labels)
}
