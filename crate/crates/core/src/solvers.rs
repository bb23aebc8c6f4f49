//! (Sub)gradient descent and the per-user proximal response map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{CostModel, LabeledDataset, Vector, WeightVector};
use crate::uncertainty::{robust_gradient, robust_local_cost, ProtectionForm, ProtectionSpec};

/// Inner iteration cap for proximal subproblems.
pub const PROX_MAX_ITERS: usize = 200;
/// Half-width of the uniform distribution for initial weights.
pub const INIT_HALF_WIDTH: f64 = 0.05;
/// Cost growth over the initial cost that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSchedule {
    #[default]
    Fixed,
    /// `λ / √t` at iteration `t ≥ 1`.
    InverseSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub step_size: f64,
    pub schedule: StepSchedule,
    pub max_iters: usize,
    /// Stop once `‖wᵗ − wᵗ⁻¹‖₂ ≤ tolerance`.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            schedule: StepSchedule::Fixed,
            max_iters: 1000,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Argument(format!("step size {} must be positive", self.step_size)));
        }
        if self.max_iters == 0 {
            return Err(Error::Argument("max_iters must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Argument(format!("tolerance {} must be positive", self.tolerance)));
        }
        Ok(())
    }

    /// Step at iteration `t` (1-based). Non-smooth objectives always decay.
    fn step_at(&self, t: usize, smooth: bool) -> f64 {
        match (self.schedule, smooth) {
            (StepSchedule::Fixed, true) => self.step_size,
            _ => self.step_size / (t as f64).sqrt(),
        }
    }
}

/// Every iterate and its cost, the starting point included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub iterates: Vec<WeightVector>,
    pub costs: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl SolveTrace {
    pub fn last(&self) -> &WeightVector {
        self.iterates.last().expect("trace holds the starting point")
    }

    pub fn final_cost(&self) -> f64 {
        *self.costs.last().expect("trace holds the starting cost")
    }

    /// Index of the lowest-cost iterate (first one on ties).
    pub fn best_index(&self) -> usize {
        self.costs
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |(bi, bc), (i, &c)| if c < bc { (i, c) } else { (bi, bc) })
            .0
    }
}

/// A differentiable (or subdifferentiable) objective over weight vectors.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, w: &WeightVector) -> Result<f64>;
    fn gradient(&self, w: &WeightVector) -> Result<WeightVector>;
    fn is_smooth(&self) -> bool {
        true
    }
}

/// The plain local cost of one dataset.
#[derive(Debug, Clone, Copy)]
pub struct DataObjective<'a> {
    pub model: &'a CostModel,
    pub data: &'a LabeledDataset,
}

impl Objective for DataObjective<'_> {
    fn dim(&self) -> usize {
        self.model.param_dim()
    }

    fn value(&self, w: &WeightVector) -> Result<f64> {
        self.model.local_cost(w, self.data)
    }

    fn gradient(&self, w: &WeightVector) -> Result<WeightVector> {
        self.model.gradient(w, self.data)
    }

    fn is_smooth(&self) -> bool {
        self.model.is_smooth()
    }
}

/// Local cost plus protection term.
#[derive(Debug, Clone, Copy)]
pub struct RobustObjective<'a> {
    pub model: &'a CostModel,
    pub data: &'a LabeledDataset,
    pub spec: &'a ProtectionSpec,
    pub anchor: &'a Vector,
    pub form: ProtectionForm,
}

impl Objective for RobustObjective<'_> {
    fn dim(&self) -> usize {
        self.model.param_dim()
    }

    fn value(&self, w: &WeightVector) -> Result<f64> {
        robust_local_cost(self.model, w, self.data, self.spec, self.anchor, self.form)
    }

    fn gradient(&self, w: &WeightVector) -> Result<WeightVector> {
        robust_gradient(self.model, w, self.data, self.spec, self.anchor, self.form)
    }

    fn is_smooth(&self) -> bool {
        let term_smooth = self.form == ProtectionForm::Direct || self.spec.is_smooth();
        self.model.is_smooth() && term_smooth
    }
}

/// `inner(w) + ½‖w − center‖²`.
#[derive(Debug, Clone, Copy)]
pub struct ProximalObjective<'a, O> {
    pub inner: O,
    pub center: &'a WeightVector,
}

impl<O: Objective> Objective for ProximalObjective<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value(&self, w: &WeightVector) -> Result<f64> {
        let d = w.as_vector() - self.center.as_vector();
        Ok(self.inner.value(w)? + 0.5 * d.norm_squared())
    }

    fn gradient(&self, w: &WeightVector) -> Result<WeightVector> {
        let g = self.inner.gradient(w)?.into_inner() + (w.as_vector() - self.center.as_vector());
        Ok(g.into())
    }

    fn is_smooth(&self) -> bool {
        self.inner.is_smooth()
    }
}

/// Seeded `uniform(−0.05, 0.05)` starting weights.
pub fn initial_weights(dim: usize, seed: u64) -> WeightVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WeightVector::from_vec(
        (0..dim).map(|_| rng.random_range(-INIT_HALF_WIDTH..INIT_HALF_WIDTH)).collect(),
    )
}

/// One descent step `w − step·(∇V(w) + extra)`.
pub fn gd_step(
    model: &CostModel,
    w: &WeightVector,
    data: &LabeledDataset,
    step: f64,
    extra_gradient: Option<&WeightVector>,
) -> Result<WeightVector> {
    if !(step > 0.0) {
        return Err(Error::Argument(format!("step {step} must be positive")));
    }
    let mut g = model.gradient(w, data)?.into_inner();
    if let Some(extra) = extra_gradient {
        if extra.len() != g.len() {
            return Err(Error::Shape("extra gradient has the wrong dimension".into()));
        }
        g += extra.as_vector();
    }
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("gradient has non-finite entries"));
    }
    Ok((w.as_vector() - g * step).into())
}

/// Gradient descent from `start` until the step norm drops to the tolerance
/// or `max_iters` steps have been taken.
pub fn descend<O: Objective>(
    objective: &O,
    start: WeightVector,
    config: &SolverConfig,
) -> Result<SolveTrace> {
    config.validate()?;
    if start.len() != objective.dim() {
        return Err(Error::Shape(format!(
            "start has {} entries, objective expects {}",
            start.len(),
            objective.dim()
        )));
    }
    let smooth = objective.is_smooth();
    let initial_cost = objective.value(&start)?;
    let mut trace = SolveTrace {
        iterates: vec![start],
        costs: vec![initial_cost],
        converged: false,
        iterations_used: 0,
    };
    let ceiling = DIVERGENCE_FACTOR * initial_cost.abs().max(f64::MIN_POSITIVE);
    for t in 1..=config.max_iters {
        let w = trace.last();
        let g = objective.gradient(w)?;
        if !g.is_finite() {
            return Err(numeric_with_trace("gradient has non-finite entries", trace));
        }
        let next: WeightVector = (w.as_vector() - g.into_inner() * config.step_at(t, smooth)).into();
        let moved = (next.as_vector() - w.as_vector()).norm();
        let cost = objective.value(&next)?;
        trace.iterates.push(next);
        trace.costs.push(cost);
        trace.iterations_used = t;
        if !cost.is_finite() || cost > ceiling {
            return Err(numeric_with_trace(
                format!("diverged at iteration {t}: cost {cost:.6e} vs initial {initial_cost:.6e}"),
                trace,
            ));
        }
        if moved <= config.tolerance {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

fn numeric_with_trace(message: impl Into<String>, trace: SolveTrace) -> Error {
    Error::Numeric {
        message: message.into(),
        trace: Some(Box::new(trace)),
    }
}

/// Gradient descent on the pooled dataset from the seeded initial point.
pub fn solve_centralized(
    model: &CostModel,
    pooled: &LabeledDataset,
    config: &SolverConfig,
) -> Result<SolveTrace> {
    solve_centralized_from(model, pooled, config, initial_weights(model.param_dim(), config.seed))
}

pub fn solve_centralized_from(
    model: &CostModel,
    pooled: &LabeledDataset,
    config: &SolverConfig,
    start: WeightVector,
) -> Result<SolveTrace> {
    descend(&DataObjective { model, data: pooled }, start, config)
}

/// Approximate `argmin_w Ṽ(w) + ½‖w − w_prev‖²` where `Ṽ` is the robust
/// local cost.
///
/// The smooth part (data term plus proximal term) takes gradient steps of
/// `config.step_size`; the server-form protection term is applied through
/// its exact prox, so kinks of the dual norm do not stall convergence.
/// Iterates until the step norm is at most `config.tolerance / 10`, at most
/// [`PROX_MAX_ITERS`] times, and returns the best iterate seen.
pub fn proximal_response(
    model: &CostModel,
    w_prev: &WeightVector,
    anchor: &Vector,
    data: &LabeledDataset,
    spec: &ProtectionSpec,
    form: ProtectionForm,
    config: &SolverConfig,
) -> Result<WeightVector> {
    config.validate()?;
    let robust = RobustObjective { model, data, spec, anchor, form };
    let objective = ProximalObjective { inner: robust, center: w_prev };
    let smooth_part = ProximalObjective { inner: DataObjective { model, data }, center: w_prev };
    let tolerance = config.tolerance / 10.0;
    let server_term = form == ProtectionForm::Server && spec.epsilon > 0.0;
    if server_term && anchor.len() != w_prev.len() {
        return Err(Error::Shape("server-form anchor has the wrong dimension".into()));
    }

    let mut w = w_prev.clone();
    let mut best = (objective.value(&w)?, w.clone());
    let mut moved = f64::INFINITY;
    for t in 1..=PROX_MAX_ITERS {
        let g = if server_term { smooth_part.gradient(&w)? } else { objective.gradient(&w)? };
        if !g.is_finite() {
            return Err(Error::numeric("proximal subproblem gradient has non-finite entries"));
        }
        let eta = config.step_at(t, model.is_smooth());
        let forward = w.as_vector() - g.into_inner() * eta;
        let next: WeightVector = if server_term {
            spec.prox_server_term(&forward, anchor, eta).into()
        } else {
            forward.into()
        };
        moved = (next.as_vector() - w.as_vector()).norm();
        w = next;
        let value = objective.value(&w)?;
        if !value.is_finite() {
            return Err(Error::numeric("proximal subproblem objective became non-finite"));
        }
        if value < best.0 {
            best = (value, w.clone());
        }
        if moved <= tolerance {
            return Ok(best.1);
        }
    }
    Err(Error::numeric(format!(
        "proximal subproblem did not converge in {PROX_MAX_ITERS} iterations \
         (last step {moved:.3e}, tolerance {tolerance:.1e})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// ½(w − a)² as a one-sample linear regression.
    fn quadratic(a: f64) -> (CostModel, LabeledDataset) {
        (CostModel::linear(1), LabeledDataset::from_rows(&[vec![1.0]], vec![a]).unwrap())
    }

    #[test]
    fn gd_step_on_quadratic() {
        let (model, data) = quadratic(1.0);
        let next = gd_step(&model, &WeightVector::zeros(1), &data, 0.5, None).unwrap();
        assert_eq!(next.as_slice(), &[0.5]);
        assert!(gd_step(&model, &WeightVector::zeros(1), &data, 0.0, None).is_err());
        let extra = WeightVector::from_vec(vec![1.0]);
        let next = gd_step(&model, &WeightVector::zeros(1), &data, 0.5, Some(&extra)).unwrap();
        assert_eq!(next.as_slice(), &[0.0]);
    }

    #[test]
    fn repeated_steps_contract_geometrically() {
        let (model, data) = quadratic(1.0);
        let mut w = WeightVector::zeros(1);
        let mut iters = 0;
        while (w[0] - 1.0).abs() > 1e-6 {
            w = gd_step(&model, &w, &data, 0.5, None).unwrap();
            iters += 1;
            // contraction oracle: error after t steps is (1 − λ)^t
            assert_relative_eq!(1.0 - w[0], 0.5f64.powi(iters), epsilon = 1e-15);
        }
        assert!(iters <= 50);
    }

    #[test]
    fn config_validation() {
        let (model, data) = quadratic(1.0);
        let bad = SolverConfig { max_iters: 0, ..Default::default() };
        assert!(matches!(solve_centralized(&model, &data, &bad), Err(Error::Argument(_))));
        let bad = SolverConfig { tolerance: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SolverConfig { step_size: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let (model, data) = quadratic(1.0);
        let config = SolverConfig { step_size: 3.0, max_iters: 100, ..Default::default() };
        match solve_centralized_from(&model, &data, &config, WeightVector::zeros(1)) {
            Err(Error::Numeric { trace: Some(trace), .. }) => {
                assert_eq!(trace.iterates.len(), trace.iterations_used + 1);
                assert_eq!(trace.costs.len(), trace.iterates.len());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn realizable_target_drives_cost_to_zero() {
        let data = LabeledDataset::from_rows(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            vec![2.0, -1.0, 1.0],
        )
        .unwrap();
        let model = CostModel::linear(2);
        let config = SolverConfig { step_size: 0.5, max_iters: 5000, tolerance: 1e-12, seed: 3, ..Default::default() };
        let trace = solve_centralized(&model, &data, &config).unwrap();
        assert!(trace.converged);
        assert!(trace.final_cost() < 1e-20);
        assert!(trace.final_cost() <= trace.costs[0]);
    }

    #[test]
    fn prox_of_quadratic_is_midpoint() {
        let (model, data) = quadratic(3.0);
        let b = WeightVector::from_vec(vec![-1.0]);
        let config = SolverConfig { step_size: 0.3, tolerance: 1e-6, ..Default::default() };
        let z = proximal_response(
            &model,
            &b,
            &Vector::zeros(1),
            &data,
            &ProtectionSpec::none(),
            ProtectionForm::Server,
            &config,
        )
        .unwrap();
        assert_relative_eq!(z[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn prox_fixed_point_at_minimizer() {
        let (model, data) = quadratic(3.0);
        let b = WeightVector::from_vec(vec![3.0]);
        let config = SolverConfig::default();
        let z = proximal_response(
            &model,
            &b,
            &Vector::zeros(1),
            &data,
            &ProtectionSpec::none(),
            ProtectionForm::Server,
            &config,
        )
        .unwrap();
        assert!((z[0] - 3.0).abs() <= config.tolerance);
    }

    #[test]
    fn prox_with_protection_matches_grid_search() {
        // ½(w − 2)² + ε|a − w| + ½(w − b)² on a scalar, for several (ε, a, b)
        let (model, data) = quadratic(2.0);
        let config = SolverConfig { step_size: 0.2, tolerance: 1e-7, ..Default::default() };
        for (eps, a, b) in [(0.5, 0.0, 1.0), (3.0, 0.5, 4.0), (0.1, -2.0, -1.0), (1.0, 1.5, 1.5)] {
            for p in [1.0, 2.0] {
                let spec = ProtectionSpec::new(p, eps, 0.0).unwrap();
                let anchor = Vector::from_element(1, a);
                let center = WeightVector::from_vec(vec![b]);
                let z = proximal_response(
                    &model,
                    &center,
                    &anchor,
                    &data,
                    &spec,
                    ProtectionForm::Server,
                    &config,
                )
                .unwrap();
                let objective = |w: f64| 0.5 * (w - 2.0).powi(2) + eps * (a - w).abs() + 0.5 * (w - b).powi(2);
                let resolution = 1e-4;
                let grid_best = (-60000..=60000)
                    .map(|i| i as f64 * resolution)
                    .min_by(|x, y| objective(*x).total_cmp(&objective(*y)))
                    .unwrap();
                assert!((z[0] - grid_best).abs() <= resolution, "eps {eps} a {a} b {b}: {} vs {grid_best}", z[0]);
            }
        }
    }

    #[test]
    fn nonsmooth_objectives_use_decaying_steps() {
        let config = SolverConfig { step_size: 1.0, ..Default::default() };
        assert_eq!(config.step_at(4, true), 1.0);
        assert_eq!(config.step_at(4, false), 0.5);
    }

    #[test]
    fn initial_weights_are_seeded_and_bounded() {
        let a = initial_weights(50, 9);
        assert_eq!(a, initial_weights(50, 9));
        assert_ne!(a, initial_weights(50, 10));
        assert!(a.iter().all(|v| v.abs() <= INIT_HALF_WIDTH));
    }
}
