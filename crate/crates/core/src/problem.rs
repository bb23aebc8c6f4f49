//! Cost families, their gradients and Hessians over a user-local dataset.
//!
//! Every cost is the *mean* over samples, so protection radii keep the same
//! meaning regardless of how many samples a user holds.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Serializes a matrix as a list of rows.
pub mod matrix_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Matrix;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(Matrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

/// Features (one row per sample) with their labels.
///
/// Labels are stored as reals. Binary families expect ±1, the multiclass
/// family expects integral class indices; both are checked when a cost is
/// evaluated, so one dataset can serve several families.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<f64>) -> Result<Self> {
        if features.ncols() == 0 {
            return Err(Error::Shape("feature dimension must be at least 1".into()));
        }
        if features.nrows() == 0 {
            return Err(Error::Shape("dataset needs at least one sample".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    /// Builds a dataset from row-major sample vectors.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<f64>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        let features = Matrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        Self::new(features, labels)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Labels as class indices in `0..classes`.
    pub fn class_labels(&self, classes: usize) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&y| {
                if y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes {
                    Ok(y as usize)
                } else {
                    Err(Error::Argument(format!(
                        "label {y} is not a class index in 0..{classes}"
                    )))
                }
            })
            .collect()
    }

    fn check_binary(&self) -> Result<()> {
        match self.labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            Some(y) => Err(Error::Argument(format!("binary label {y} is not ±1"))),
            None => Ok(()),
        }
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let features = self.features.select_rows(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels)
    }

    /// Stacks user datasets into the pooled dataset.
    pub fn concat(parts: &[LabeledDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("cannot pool an empty partition".into()))?;
        let dim = first.dim();
        if parts.iter().any(|p| p.dim() != dim) {
            return Err(Error::Shape("user datasets differ in feature dimension".into()));
        }
        let rows: usize = parts.iter().map(LabeledDataset::num_samples).sum();
        let mut features = Matrix::zeros(rows, dim);
        let mut labels = Vec::with_capacity(rows);
        let mut offset = 0;
        for part in parts {
            features
                .rows_mut(offset, part.num_samples())
                .copy_from(&part.features);
            labels.extend_from_slice(&part.labels);
            offset += part.num_samples();
        }
        Self::new(features, labels)
    }
}

/// Flat model parameter vector.
///
/// Multiclass models store a `K × C` matrix in column-major order: entry
/// `(k, c)` lives at index `c * K + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vector);

impl Serialize for WeightVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for WeightVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Vec::<f64>::deserialize(d).map(Self::from_vec)
    }
}

impl WeightVector {
    pub fn zeros(dim: usize) -> Self {
        Self(Vector::zeros(dim))
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(Vector::from_vec(values))
    }

    pub fn as_vector(&self) -> &Vector {
        &self.0
    }

    pub fn into_inner(self) -> Vector {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vector> for WeightVector {
    fn from(v: Vector) -> Self {
        Self(v)
    }
}

impl Deref for WeightVector {
    type Target = Vector;

    fn deref(&self) -> &Vector {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum Family {
    LinearRegression,
    LogisticBinary,
    LogisticMulticlass { classes: usize },
    HingeSvm,
}

/// A cost family bound to a feature dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(flatten)]
    family: Family,
    features: usize,
}

impl CostModel {
    pub fn new(family: Family, features: usize) -> Result<Self> {
        if features == 0 {
            return Err(Error::Argument("feature dimension must be positive".into()));
        }
        if let Family::LogisticMulticlass { classes } = family {
            if classes < 2 {
                return Err(Error::Argument("multiclass model needs at least 2 classes".into()));
            }
        }
        Ok(Self { family, features })
    }

    pub fn linear(features: usize) -> Self {
        Self { family: Family::LinearRegression, features }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> Option<usize> {
        match self.family {
            Family::LogisticMulticlass { classes } => Some(classes),
            Family::LogisticBinary | Family::HingeSvm => Some(2),
            Family::LinearRegression => None,
        }
    }

    /// Number of trainable parameters.
    pub fn param_dim(&self) -> usize {
        match self.family {
            Family::LogisticMulticlass { classes } => self.features * classes,
            _ => self.features,
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self.family, Family::HingeSvm)
    }

    fn check(&self, w: &WeightVector, data: &LabeledDataset) -> Result<()> {
        if data.dim() != self.features {
            return Err(Error::Shape(format!(
                "model expects {} features, dataset has {}",
                self.features,
                data.dim()
            )));
        }
        if w.len() != self.param_dim() {
            return Err(Error::Shape(format!(
                "model has {} parameters, weight vector has {}",
                self.param_dim(),
                w.len()
            )));
        }
        Ok(())
    }

    /// Weights reshaped to `K × C`.
    fn weight_matrix(&self, w: &WeightVector, classes: usize) -> Matrix {
        Matrix::from_column_slice(self.features, classes, w.as_slice())
    }

    /// Per-sample scores: `Xw` for scalar families, `XW` (m × C) for
    /// multiclass.
    pub fn scores(&self, w: &WeightVector, data: &LabeledDataset) -> Result<Matrix> {
        self.check(w, data)?;
        let x = data.features();
        Ok(match self.family {
            Family::LogisticMulticlass { classes } => x * self.weight_matrix(w, classes),
            _ => {
                let z = x * w.as_vector();
                Matrix::from_column_slice(z.len(), 1, z.as_slice())
            }
        })
    }

    /// Mean cost over the samples of `data`.
    pub fn local_cost(&self, w: &WeightVector, data: &LabeledDataset) -> Result<f64> {
        self.check(w, data)?;
        let m = data.num_samples() as f64;
        let x = data.features();
        let y = data.labels();
        let total = match self.family {
            Family::LinearRegression => {
                let z = x * w.as_vector();
                z.iter().zip(y).map(|(z, y)| 0.5 * (z - y).powi(2)).sum::<f64>()
            }
            Family::LogisticBinary => {
                data.check_binary()?;
                let z = x * w.as_vector();
                z.iter().zip(y).map(|(z, y)| softplus(-y * z)).sum::<f64>()
            }
            Family::HingeSvm => {
                data.check_binary()?;
                let z = x * w.as_vector();
                z.iter().zip(y).map(|(z, y)| (1.0 - y * z).max(0.0)).sum::<f64>()
            }
            Family::LogisticMulticlass { classes } => {
                let labels = data.class_labels(classes)?;
                let s = x * self.weight_matrix(w, classes);
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| log_sum_exp(s.row(i).iter().copied()) - s[(i, c)])
                    .sum::<f64>()
            }
        };
        Ok(total / m)
    }

    /// Mean of the users' local costs.
    pub fn global_cost(&self, w: &WeightVector, partition: &[LabeledDataset]) -> Result<f64> {
        if partition.is_empty() {
            return Err(Error::Argument("global cost over an empty partition".into()));
        }
        let mut sum = 0.0;
        for data in partition {
            sum += self.local_cost(w, data)?;
        }
        Ok(sum / partition.len() as f64)
    }

    /// Gradient of `local_cost`, or for the hinge family the subgradient
    /// that picks 0 for samples sitting exactly on the margin.
    pub fn gradient(&self, w: &WeightVector, data: &LabeledDataset) -> Result<WeightVector> {
        self.check(w, data)?;
        let m = data.num_samples() as f64;
        let x = data.features();
        let y = data.labels();
        let g = match self.family {
            Family::LinearRegression => {
                let mut r = x * w.as_vector();
                r.iter_mut().zip(y).for_each(|(r, y)| *r -= y);
                x.tr_mul(&r)
            }
            Family::LogisticBinary => {
                data.check_binary()?;
                let mut c = x * w.as_vector();
                c.iter_mut().zip(y).for_each(|(z, y)| *z = -y * sigmoid(-y * *z));
                x.tr_mul(&c)
            }
            Family::HingeSvm => {
                data.check_binary()?;
                let mut c = x * w.as_vector();
                c.iter_mut()
                    .zip(y)
                    .for_each(|(z, y)| *z = if y * *z < 1.0 { -y } else { 0.0 });
                x.tr_mul(&c)
            }
            Family::LogisticMulticlass { classes } => {
                let labels = data.class_labels(classes)?;
                let mut p = x * self.weight_matrix(w, classes);
                softmax_rows(&mut p);
                for (i, &c) in labels.iter().enumerate() {
                    p[(i, c)] -= 1.0;
                }
                let g = x.tr_mul(&p);
                Vector::from_column_slice(g.as_slice())
            }
        };
        Ok(WeightVector(g / m))
    }

    /// Hessian of `local_cost` with respect to the full parameter vector.
    pub fn hessian_block(&self, w: &WeightVector, data: &LabeledDataset) -> Result<Matrix> {
        self.check(w, data)?;
        let m = data.num_samples() as f64;
        let x = data.features();
        let h = match self.family {
            Family::HingeSvm => {
                return Err(Error::Unsupported("hinge loss is not twice differentiable".into()))
            }
            Family::LinearRegression => x.tr_mul(x),
            Family::LogisticBinary => {
                data.check_binary()?;
                let z = x * w.as_vector();
                let mut weighted = x.clone();
                for (i, z) in z.iter().enumerate() {
                    let s = sigmoid(*z);
                    weighted.row_mut(i).scale_mut(s * (1.0 - s));
                }
                x.tr_mul(&weighted)
            }
            Family::LogisticMulticlass { classes } => {
                let k = self.features;
                let mut p = x * self.weight_matrix(w, classes);
                softmax_rows(&mut p);
                let mut h = Matrix::zeros(k * classes, k * classes);
                let mut weighted = x.clone();
                for a in 0..classes {
                    for b in a..classes {
                        for i in 0..x.nrows() {
                            let pa = p[(i, a)];
                            let coef = if a == b { pa * (1.0 - pa) } else { -pa * p[(i, b)] };
                            weighted.row_mut(i).copy_from(&x.row(i));
                            weighted.row_mut(i).scale_mut(coef);
                        }
                        let block = x.tr_mul(&weighted);
                        h.view_mut((a * k, b * k), (k, k)).copy_from(&block);
                        if a != b {
                            h.view_mut((b * k, a * k), (k, k)).copy_from(&block.transpose());
                        }
                    }
                }
                h
            }
        };
        let h = h / m;
        Ok((&h + h.transpose()) * 0.5)
    }
}

/// `ln(1 + e^t)` without overflow.
pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_rows(s: &mut Matrix) {
    for mut row in s.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let total = row.sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
}
