//! Variational-inequality diagnostics comparing federated and centralized
//! solutions.
//!
//! The centralized problem is the VI whose map stacks the users' gradients.
//! If the `Υ` matrix built from per-user curvature and cross-user coupling
//! is a P-matrix, the perturbed (protected) problem has a unique solution
//! and its distance to the centralized one is bounded by `‖ε‖₂ / c_sm`.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{CostModel, Family, LabeledDataset, Matrix, Vector, WeightVector};
use crate::uncertainty::{lp_norm, robust_gradient, ProtectionForm, ProtectionSpec};

/// Largest order accepted by [`is_p_matrix`].
pub const MAX_P_MATRIX_ORDER: usize = 12;
/// Slack on the gap bound comparison.
pub const BOUND_SLACK: f64 = 1e-9;

fn require_smooth(model: &CostModel) -> Result<()> {
    if model.is_smooth() {
        Ok(())
    } else {
        Err(Error::Unsupported("VI diagnostics need a smooth cost family".into()))
    }
}

/// Per-user gradients `ℱₙ(w) = ∇Vₙ(w)`.
pub fn vi_mapping(
    model: &CostModel,
    w: &WeightVector,
    partition: &[LabeledDataset],
) -> Result<Vec<WeightVector>> {
    require_smooth(model)?;
    partition.iter().map(|data| model.gradient(w, data)).collect()
}

/// Per-user gradients of the protected costs.
pub fn perturbed_vi_mapping(
    model: &CostModel,
    w: &WeightVector,
    partition: &[LabeledDataset],
    specs: &[ProtectionSpec],
    anchor: &Vector,
    form: ProtectionForm,
) -> Result<Vec<WeightVector>> {
    require_smooth(model)?;
    if specs.len() != partition.len() {
        return Err(Error::Argument("one protection spec per user is required".into()));
    }
    partition
        .iter()
        .zip(specs)
        .map(|(data, spec)| robust_gradient(model, w, data, spec, anchor, form))
        .collect()
}

/// Largest `‖ℱ̃ₙ(w) − ℱₙ(w)‖₂` over users and grid points.
pub fn perturbation_bound(
    model: &CostModel,
    partition: &[LabeledDataset],
    specs: &[ProtectionSpec],
    anchor: &Vector,
    form: ProtectionForm,
    grid: &[WeightVector],
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for w in grid {
        let plain = vi_mapping(model, w, partition)?;
        let perturbed = perturbed_vi_mapping(model, w, partition, specs, anchor, form)?;
        for (a, b) in plain.iter().zip(&perturbed) {
            worst = worst.max((a.as_vector() - b.as_vector()).norm());
        }
    }
    Ok(worst)
}

/// Seeded points drawn uniformly from `[center − h, center + h]^dim`.
pub fn sample_grid(center: &WeightVector, count: usize, half_width: f64, seed: u64) -> Vec<WeightVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            center
                .iter()
                .map(|c| c + rng.random_range(-half_width..=half_width))
                .collect::<Vec<_>>()
        })
        .map(WeightVector::from_vec)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsilonMatrix {
    #[serde(with = "crate::problem::matrix_rows")]
    pub entries: Matrix,
    pub alpha_min: Vec<f64>,
    /// Zero diagonal.
    #[serde(with = "crate::problem::matrix_rows")]
    pub beta_max: Matrix,
    /// The coupling has kinks (`q ∈ {1, ∞}`) where its cross curvature is
    /// zero almost everywhere and undefined on the kinks.
    pub coupling_nonsmooth: bool,
}

fn spectral_norm(m: &Matrix) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().fold(0.0, |a: f64, v| a.max(v.abs()))
}

fn min_eigenvalue(m: &Matrix) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Hessian of `u ↦ ‖u‖_q` for `1 < q < ∞`, `u ≠ 0`.
fn norm_hessian(u: &Vector, q: f64) -> Matrix {
    let s = lp_norm(u.as_slice(), q);
    let r = u / s;
    let v = r.map(|x| x.signum() * x.abs().powf(q - 1.0));
    let d = Matrix::from_diagonal(&r.map(|x| x.abs().powf(q - 2.0)));
    (d - &v * v.transpose()) * ((q - 1.0) / s)
}

/// `Υ` from per-user curvature and the protection coupling.
///
/// Diagonal: the smallest Hessian eigenvalue of each user's data term over
/// the grid (exact for linear regression, whose Hessian does not depend on
/// `w`). Off-diagonal: every user optimizes the full shared vector and the
/// only cross-user dependence is the server-form term `εₙ‖w̄ − wₙ‖_q` with
/// `w̄` the mean of all users' weights. Its mixed second derivative in
/// `(wₙ, wₘ)` is `−εₙ (N−1)/N² ∇²‖u‖_q`; the spectral norm is maximized over
/// unit-`q`-norm offsets `u` along the grid directions. The direct form does
/// not depend on `wₙ` at all, so it contributes no cross curvature.
pub fn build_upsilon(
    model: &CostModel,
    partition: &[LabeledDataset],
    specs: &[ProtectionSpec],
    form: ProtectionForm,
    grid: &[WeightVector],
) -> Result<UpsilonMatrix> {
    require_smooth(model)?;
    if grid.is_empty() {
        return Err(Error::Argument("Υ needs a nonempty sample grid".into()));
    }
    if specs.len() != partition.len() {
        return Err(Error::Argument("one protection spec per user is required".into()));
    }
    let n = partition.len();
    let constant_hessian = model.family() == Family::LinearRegression;
    let mut alpha_min = Vec::with_capacity(n);
    for data in partition {
        let points = if constant_hessian { &grid[..1] } else { grid };
        let mut alpha = f64::INFINITY;
        for w in points {
            alpha = alpha.min(min_eigenvalue(&model.hessian_block(w, data)?));
        }
        alpha_min.push(alpha);
    }

    let mut coupling_nonsmooth = false;
    let mut beta_max = Matrix::zeros(n, n);
    if form == ProtectionForm::Server && n > 1 {
        let scale = (n - 1) as f64 / (n * n) as f64;
        for (row, spec) in specs.iter().enumerate() {
            if spec.epsilon == 0.0 {
                continue;
            }
            let q = spec.dual_order();
            let curvature = if q == 2.0 {
                if model.param_dim() > 1 { 1.0 } else { 0.0 }
            } else if q.is_infinite() || q == 1.0 {
                coupling_nonsmooth = true;
                0.0
            } else {
                grid.iter()
                    .filter(|w| w.iter().any(|v| *v != 0.0))
                    .map(|w| {
                        let u = w.as_vector() / lp_norm(w.as_slice(), q);
                        spectral_norm(&norm_hessian(&u, q))
                    })
                    .fold(0.0, f64::max)
            };
            for col in 0..n {
                if col != row {
                    beta_max[(row, col)] = spec.epsilon * scale * curvature;
                }
            }
        }
    }
    let entries = Matrix::from_fn(n, n, |i, j| if i == j { alpha_min[i] } else { -beta_max[(i, j)] });
    Ok(UpsilonMatrix { entries, alpha_min, beta_max, coupling_nonsmooth })
}

/// Exact test: every principal minor is strictly positive.
pub fn is_p_matrix(m: &Matrix) -> Result<bool> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Shape(format!("{}×{} matrix is not square", n, m.ncols())));
    }
    if n == 0 {
        return Err(Error::Argument("empty matrix".into()));
    }
    if n > MAX_P_MATRIX_ORDER {
        return Err(Error::Size(n));
    }
    if (0..n).any(|i| !(m[(i, i)] > 0.0)) {
        return Ok(false);
    }
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let sub = m.select_rows(&idx).select_columns(&idx);
        if !(sub.lu().determinant() > 0.0) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityEstimate {
    pub value: f64,
    /// `true` when the value is the minimum monotonicity quotient over
    /// sampled pairs, an upper bound on the true constant.
    pub sampled: bool,
}

/// Strong monotonicity constant of `∇V` on the pooled data.
pub fn estimate_c_sm(
    model: &CostModel,
    pooled: &LabeledDataset,
    grid: &[WeightVector],
) -> Result<MonotonicityEstimate> {
    require_smooth(model)?;
    if model.family() == Family::LinearRegression {
        let h = model.hessian_block(&WeightVector::zeros(model.param_dim()), pooled)?;
        return Ok(MonotonicityEstimate { value: min_eigenvalue(&h), sampled: false });
    }
    if grid.len() < 2 {
        return Err(Error::Argument("sampled c_sm needs at least two grid points".into()));
    }
    let grads: Vec<WeightVector> =
        grid.iter().map(|w| model.gradient(w, pooled)).collect::<Result<_>>()?;
    let mut best = f64::INFINITY;
    for i in 0..grid.len() {
        for j in (i + 1)..grid.len() {
            let dw = grid[i].as_vector() - grid[j].as_vector();
            let denom = dw.norm_squared();
            if denom == 0.0 {
                continue;
            }
            let df = grads[i].as_vector() - grads[j].as_vector();
            best = best.min(dw.dot(&df) / denom);
        }
    }
    Ok(MonotonicityEstimate { value: best, sampled: true })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub delta: f64,
    pub epsilon_norm: f64,
    pub c_sm: f64,
    pub bound: f64,
    pub bound_holds: bool,
}

/// `Δ = ‖w_C − w_F‖₂` against `‖ε‖₂ / c_sm`.
pub fn gap_report(
    w_centralized: &WeightVector,
    w_federated: &WeightVector,
    epsilons: &[f64],
    c_sm: f64,
) -> Result<GapReport> {
    if !(c_sm > 0.0) {
        return Err(Error::Argument(format!(
            "c_sm = {c_sm}: the map is not strongly monotone on the sampled set"
        )));
    }
    if w_centralized.len() != w_federated.len() {
        return Err(Error::Shape("solutions differ in dimension".into()));
    }
    let delta = (w_centralized.as_vector() - w_federated.as_vector()).norm();
    let epsilon_norm = epsilons.iter().map(|e| e * e).sum::<f64>().sqrt();
    let bound = epsilon_norm / c_sm;
    Ok(GapReport { delta, epsilon_norm, c_sm, bound, bound_holds: delta <= bound + BOUND_SLACK })
}

/// `‖(1/N) Σ ∇Vₙ(w_F)‖₂ / c_sm`: by strong monotonicity the distance from
/// `w_F` to the centralized optimum never exceeds this.
pub fn residual_gap_bound(
    model: &CostModel,
    partition: &[LabeledDataset],
    w_federated: &WeightVector,
    c_sm: f64,
) -> Result<f64> {
    let grads = vi_mapping(model, w_federated, partition)?;
    let mut mean = Vector::zeros(w_federated.len());
    for g in &grads {
        mean += g.as_vector();
    }
    mean /= grads.len() as f64;
    Ok(mean.norm() / c_sm)
}

/// Fraction of components with `w_C ≤ w_F`.
pub fn componentwise_dominance(w_centralized: &WeightVector, w_federated: &WeightVector) -> f64 {
    let hits = w_centralized.iter().zip(w_federated.iter()).filter(|(c, f)| c <= f).count();
    hits as f64 / w_centralized.len().max(1) as f64
}

/// Everything the diagnostics produce for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub upsilon: UpsilonMatrix,
    /// `None` when there are more users than exact enumeration allows.
    pub p_matrix: Option<bool>,
    pub c_sm: MonotonicityEstimate,
    pub perturbation_bound: f64,
    pub gap: Option<GapReport>,
    pub residual_bound: Option<f64>,
    pub componentwise_dominance: Option<f64>,
}

pub struct DiagnosticsInput<'a> {
    pub model: &'a CostModel,
    pub partition: &'a [LabeledDataset],
    pub specs: &'a [ProtectionSpec],
    pub form: ProtectionForm,
    pub grid: &'a [WeightVector],
    pub centralized: Option<&'a WeightVector>,
    pub federated: Option<&'a WeightVector>,
}

pub fn diagnose(input: &DiagnosticsInput<'_>) -> Result<DiagnosticsReport> {
    let model = input.model;
    let upsilon = build_upsilon(model, input.partition, input.specs, input.form, input.grid)?;
    let p_matrix = match is_p_matrix(&upsilon.entries) {
        Ok(v) => Some(v),
        Err(Error::Size(_)) => None,
        Err(e) => return Err(e),
    };
    let pooled = LabeledDataset::concat(input.partition)?;
    let c_sm = estimate_c_sm(model, &pooled, input.grid)?;
    let anchor = input
        .centralized
        .map(|w| w.as_vector().clone())
        .unwrap_or_else(|| Vector::zeros(model.param_dim()));
    let perturbation_bound =
        perturbation_bound(model, input.partition, input.specs, &anchor, input.form, input.grid)?;
    let (gap, residual_bound, dominance) = match (input.centralized, input.federated) {
        (Some(wc), Some(wf)) if c_sm.value > 0.0 => {
            let eps: Vec<f64> = input.specs.iter().map(|s| s.epsilon).collect();
            (
                Some(gap_report(wc, wf, &eps, c_sm.value)?),
                Some(residual_gap_bound(model, input.partition, wf, c_sm.value)?),
                Some(componentwise_dominance(wc, wf)),
            )
        }
        _ => (None, None, None),
    };
    Ok(DiagnosticsReport {
        upsilon,
        p_matrix,
        c_sm,
        perturbation_bound,
        gap,
        residual_bound,
        componentwise_dominance: dominance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn p_matrix_examples() {
        assert!(is_p_matrix(&Matrix::identity(4, 4)).unwrap());
        let m = Matrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 1.0]);
        assert!(!is_p_matrix(&m).unwrap());
        let m = Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 3.0]);
        assert!(!is_p_matrix(&m).unwrap());
        // positive minors, not symmetric
        let m = Matrix::from_row_slice(2, 2, &[1.0, 5.0, -5.0, 1.0]);
        assert!(is_p_matrix(&m).unwrap());
    }

    #[test]
    fn p_matrix_guards() {
        assert!(matches!(is_p_matrix(&Matrix::identity(13, 13)), Err(Error::Size(13))));
        assert!(matches!(is_p_matrix(&Matrix::zeros(2, 3)), Err(Error::Shape(_))));
        assert!(is_p_matrix(&Matrix::identity(12, 12)).unwrap());
    }

    #[test]
    fn gap_examples() {
        let z = WeightVector::zeros(2);
        let r = gap_report(&z, &z, &[0.1, 0.2], 1.0).unwrap();
        assert_eq!(r.delta, 0.0);
        assert!(r.bound_holds);

        let f = WeightVector::from_vec(vec![3.0, 4.0]);
        let r = gap_report(&z, &f, &[1.0, 1.0], 2.0).unwrap();
        assert_eq!(r.delta, 5.0);
        assert_relative_eq!(r.bound, 2f64.sqrt() / 2.0, epsilon = 1e-15);
        assert!(!r.bound_holds);
        assert!(gap_report(&z, &f, &[1.0], 0.0).is_err());
        assert!(gap_report(&z, &f, &[1.0], -1.0).is_err());
    }

    #[test]
    fn c_sm_of_diagonal_quadratic() {
        // XᵀX/m = diag(2, 5)
        let data = LabeledDataset::from_rows(&[vec![2.0, 0.0], vec![0.0, 10f64.sqrt()]], vec![0.0, 0.0])
            .unwrap();
        let model = CostModel::linear(2);
        let est = estimate_c_sm(&model, &data, &[WeightVector::zeros(2)]).unwrap();
        assert!(!est.sampled);
        assert_relative_eq!(est.value, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn single_user_upsilon() {
        let data = LabeledDataset::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]], vec![0.0, 1.0]).unwrap();
        let model = CostModel::linear(2);
        let spec = ProtectionSpec::new(2.0, 0.3, 0.0).unwrap();
        let grid = sample_grid(&WeightVector::zeros(2), 4, 1.0, 1);
        let u = build_upsilon(&model, &[data], &[spec], ProtectionForm::Server, &grid).unwrap();
        assert_eq!(u.entries.shape(), (1, 1));
        assert_relative_eq!(u.entries[(0, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn l2_server_coupling_is_eps_scaled() {
        let a = LabeledDataset::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 1.0]).unwrap();
        let model = CostModel::linear(2);
        let specs = [ProtectionSpec::new(2.0, 0.4, 0.0).unwrap(), ProtectionSpec::new(2.0, 0.8, 0.0).unwrap()];
        let grid = sample_grid(&WeightVector::zeros(2), 8, 1.0, 2);
        let u = build_upsilon(&model, &[a.clone(), a], &specs, ProtectionForm::Server, &grid).unwrap();
        assert_relative_eq!(u.beta_max[(0, 1)], 0.4 * 0.25, epsilon = 1e-12);
        assert_relative_eq!(u.entries[(1, 0)], -0.8 * 0.25, epsilon = 1e-12);
        assert_eq!(u.beta_max[(0, 0)], 0.0);
        assert!(u.entries.iter().enumerate().all(|(k, v)| k % 3 == 0 || *v <= 0.0));
    }

    #[test]
    fn norm_hessian_matches_finite_differences() {
        let u = Vector::from_column_slice(&[0.7, -0.4, 1.1]);
        let q = 1.5;
        let h = norm_hessian(&u, q);
        let grad = |u: &Vector| crate::uncertainty::norm_subgradient(u, q);
        let step = 1e-6;
        for j in 0..3 {
            let mut up = u.clone();
            up[j] += step;
            let mut dn = u.clone();
            dn[j] -= step;
            let col = (grad(&up) - grad(&dn)) / (2.0 * step);
            for i in 0..3 {
                assert_relative_eq!(h[(i, j)], col[i], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn hinge_is_unsupported() {
        let model = CostModel::new(Family::HingeSvm, 1).unwrap();
        let data = LabeledDataset::from_rows(&[vec![1.0]], vec![1.0]).unwrap();
        assert!(matches!(
            vi_mapping(&model, &WeightVector::zeros(1), &[data]),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn dominance_fraction() {
        let c = WeightVector::from_vec(vec![0.0, 1.0, 2.0, 3.0]);
        let f = WeightVector::from_vec(vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(componentwise_dominance(&c, &f), 0.5);
    }
}
