//! Uncertainty regions, protection functions and the worst-case inner
//! maximization.
//!
//! A user's unknown coupling to the other users is modelled as a nominal
//! value plus a perturbation confined to a `p`-norm ball of radius `ε`,
//! together with a scalar offset bounded by `δ`. For a linear coupling
//! `f̂ᵀa` the worst case has the closed form `ε‖a‖_q + δ` with `q` the
//! conjugate exponent of `p`; that quantity is the protection term
//! added to the local cost.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{CostModel, LabeledDataset, Vector, WeightVector};

/// Iteration cap for projected ascent over a general `p`-ball.
pub const ASCENT_MAX_ITERS: usize = 500;
/// Step-norm tolerance for projected ascent.
pub const ASCENT_TOLERANCE: f64 = 1e-8;
/// Below this gradient norm the inner maximizer leaves the nominal point.
pub const FLAT_GRADIENT: f64 = 1e-12;

/// Conjugate exponent `q` with `1/p + 1/q = 1`.
pub fn dual_norm_order(p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::Argument(format!("norm order {p} is below 1")));
    }
    Ok(if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        1.0 + 1.0 / (p - 1.0)
    })
}

/// `‖v‖_p` for `p ≥ 1`, including `p = ∞`.
pub fn lp_norm(v: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    } else if p == 1.0 {
        v.iter().map(|x| x.abs()).sum()
    } else if p == 2.0 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    } else {
        // scale first so large entries do not overflow the power sum
        let scale = v.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        scale * v.iter().map(|x| (x.abs() / scale).powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// A subgradient of `‖v‖_q`; the zero vector at `v = 0`. For `q = ∞` ties
/// between maximal entries go to the first index.
pub fn norm_subgradient(v: &Vector, q: f64) -> Vector {
    let mut g = Vector::zeros(v.len());
    let norm = lp_norm(v.as_slice(), q);
    if norm == 0.0 {
        return g;
    }
    if q.is_infinite() {
        let (idx, _) = v
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
        g[idx] = v[idx].signum();
    } else if q == 1.0 {
        g.iter_mut()
            .zip(v.iter())
            .for_each(|(g, x)| *g = if *x == 0.0 { 0.0 } else { x.signum() });
    } else if q == 2.0 {
        g = v / norm;
    } else {
        g.iter_mut()
            .zip(v.iter())
            .for_each(|(g, x)| *g = x.signum() * (x.abs() / norm).powf(q - 1.0));
    }
    g
}

/// Euclidean projection of `v` onto `{x : ‖x‖_p ≤ radius}`.
pub fn project_onto_ball(v: &Vector, p: f64, radius: f64) -> Vector {
    if radius <= 0.0 {
        return Vector::zeros(v.len());
    }
    if lp_norm(v.as_slice(), p) <= radius {
        return v.clone();
    }
    if p == 2.0 {
        v * (radius / lp_norm(v.as_slice(), 2.0))
    } else if p.is_infinite() {
        v.map(|x| x.clamp(-radius, radius))
    } else if p == 1.0 {
        project_l1(v, radius)
    } else {
        project_lp(v, p, radius)
    }
}

fn project_l1(v: &Vector, radius: f64) -> Vector {
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumulative += uj;
        let t = (cumulative - radius) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    v.map(|x| x.signum() * (x.abs() - theta).max(0.0))
}

/// General `p > 1`: the projection is `sign(v)·u` with `u_i + μ p u_i^{p-1}
/// = |v_i|`; the multiplier `μ` is found by bisection on the ball
/// constraint, each `u_i` by bisection on its scalar equation.
fn project_lp(v: &Vector, p: f64, radius: f64) -> Vector {
    let scale = v.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
    let a: Vec<f64> = v.iter().map(|x| x.abs() / scale).collect();
    let r = radius / scale;
    let solve_coord = |ai: f64, mu: f64| -> f64 {
        let (mut lo, mut hi) = (0.0, ai);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if mid + mu * p * mid.powf(p - 1.0) > ai {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    };
    let norm_at = |mu: f64| lp_norm(&a.iter().map(|&ai| solve_coord(ai, mu)).collect::<Vec<_>>(), p);
    let mut hi = 1.0;
    while norm_at(hi) > r {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if norm_at(mid) > r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let u: Vec<f64> = a.iter().map(|&ai| solve_coord(ai, hi)).collect();
    Vector::from_iterator(v.len(), v.iter().zip(u).map(|(x, u)| x.signum() * u * scale))
}

/// Region parameters `(p, ε, δ)` for one user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtectionSpec {
    pub p: f64,
    pub epsilon: f64,
    pub delta: f64,
}

impl ProtectionSpec {
    pub fn new(p: f64, epsilon: f64, delta: f64) -> Result<Self> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::Argument(format!("norm order {p} is below 1")));
        }
        if !(epsilon >= 0.0) || !(delta >= 0.0) {
            return Err(Error::Argument(format!(
                "epsilon ({epsilon}) and delta ({delta}) must be non-negative"
            )));
        }
        Ok(Self { p, epsilon, delta })
    }

    /// No protection at all.
    pub fn none() -> Self {
        Self { p: 2.0, epsilon: 0.0, delta: 0.0 }
    }

    pub fn is_inactive(&self) -> bool {
        self.epsilon == 0.0 && self.delta == 0.0
    }

    pub fn dual_order(&self) -> f64 {
        dual_norm_order(self.p).expect("validated at construction")
    }

    /// The dual-norm term has kinks away from the origin only for `q ∈ {1, ∞}`.
    pub fn is_smooth(&self) -> bool {
        let q = self.dual_order();
        self.epsilon == 0.0 || (q > 1.0 && q.is_finite())
    }

    /// `argmin_w t·ε‖anchor − w‖_q + ½‖w − v‖²`.
    ///
    /// With `u = anchor − w` this is the prox of the dual norm, which by
    /// Moreau's identity is `z − Π_{‖·‖_p ≤ tε}(z)` for `z = anchor − v`.
    pub fn prox_server_term(&self, v: &Vector, anchor: &Vector, t: f64) -> Vector {
        if self.epsilon == 0.0 {
            return v.clone();
        }
        let z = anchor - v;
        let u = &z - project_onto_ball(&z, self.p, t * self.epsilon);
        anchor - u
    }
}

/// How the protection term is anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtectionForm {
    /// `ε‖w₋ₙ‖_q + δ` on the stacked weights of the other users.
    Direct,
    /// `ε‖w − wₙ‖_q + δ` against the broadcast aggregate `w`.
    #[default]
    Server,
}

/// `ε‖w_other‖_q + δ`.
pub fn protection_term(spec: &ProtectionSpec, w_other: &Vector) -> f64 {
    if spec.epsilon == 0.0 {
        return spec.delta;
    }
    spec.epsilon * lp_norm(w_other.as_slice(), spec.dual_order()) + spec.delta
}

fn server_offset(w_self: &WeightVector, anchor: &Vector) -> Result<Vector> {
    if anchor.len() != w_self.len() {
        return Err(Error::Shape(format!(
            "server-form anchor has {} entries, weights have {}",
            anchor.len(),
            w_self.len()
        )));
    }
    Ok(anchor - w_self.as_vector())
}

/// Local cost plus the protection term in the selected form.
pub fn robust_local_cost(
    model: &CostModel,
    w_self: &WeightVector,
    data: &LabeledDataset,
    spec: &ProtectionSpec,
    anchor: &Vector,
    form: ProtectionForm,
) -> Result<f64> {
    let base = model.local_cost(w_self, data)?;
    if spec.is_inactive() {
        return Ok(base);
    }
    let term = match form {
        ProtectionForm::Direct => protection_term(spec, anchor),
        ProtectionForm::Server => protection_term(spec, &server_offset(w_self, anchor)?),
    };
    Ok(base + term)
}

/// (Sub)gradient of [`robust_local_cost`] with respect to `w_self`.
pub fn robust_gradient(
    model: &CostModel,
    w_self: &WeightVector,
    data: &LabeledDataset,
    spec: &ProtectionSpec,
    anchor: &Vector,
    form: ProtectionForm,
) -> Result<WeightVector> {
    let g = model.gradient(w_self, data)?;
    if spec.epsilon == 0.0 {
        return Ok(g);
    }
    match form {
        ProtectionForm::Direct => Ok(g),
        ProtectionForm::Server => {
            let u = server_offset(w_self, anchor)?;
            let s = norm_subgradient(&u, spec.dual_order());
            Ok(WeightVector::from(g.into_inner() - s * spec.epsilon))
        }
    }
}

/// Maximizer of an objective over the Euclidean ball of radius `epsilon`
/// around `nominal`, given the objective's gradient: the nominal point
/// moved by `epsilon` along the normalized gradient.
pub fn inner_maximizer(grad_wrt_f: &Vector, nominal: &Vector, epsilon: f64) -> Vector {
    let norm = grad_wrt_f.norm();
    if epsilon == 0.0 || norm < FLAT_GRADIENT {
        return nominal.clone();
    }
    nominal + grad_wrt_f * (epsilon / norm)
}

/// Uncertain coupling `f = f̄ + f̂` with `‖f̂‖_p ≤ ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainFunction {
    pub nominal: Vector,
    pub bound: ProtectionSpec,
}

/// How the coupling enters the user's cost: `Ṽ(w, f) = V(w) + g(f) + ŷ`
/// where `|ŷ| ≤ δ` is the offset perturbation.
#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    /// `g(f) = cᵀf`.
    Linear { coefficients: Vector },
    /// `g(f) = cᵀf − ½κ‖f‖²`, κ > 0.
    ConcaveQuadratic { coefficients: Vector, curvature: f64 },
}

impl Coupling {
    fn coefficients(&self) -> &Vector {
        match self {
            Coupling::Linear { coefficients } | Coupling::ConcaveQuadratic { coefficients, .. } => {
                coefficients
            }
        }
    }

    pub fn value(&self, f: &Vector) -> f64 {
        match self {
            Coupling::Linear { coefficients } => coefficients.dot(f),
            Coupling::ConcaveQuadratic { coefficients, curvature } => {
                coefficients.dot(f) - 0.5 * curvature * f.norm_squared()
            }
        }
    }

    pub fn gradient(&self, f: &Vector) -> Vector {
        match self {
            Coupling::Linear { coefficients } => coefficients.clone(),
            Coupling::ConcaveQuadratic { coefficients, curvature } => coefficients - f * *curvature,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerSolve {
    /// Dual-norm closed form; only valid for [`Coupling::Linear`].
    ClosedForm,
    /// Projected gradient ascent over the `p`-ball.
    ProjectedAscent,
}

/// `max_{‖f̂‖_p ≤ ε, |ŷ| ≤ δ} V(w) + g(f̄ + f̂) + ŷ`.
pub fn worst_case_value(
    model: &CostModel,
    w_self: &WeightVector,
    data: &LabeledDataset,
    uf: &UncertainFunction,
    coupling: &Coupling,
    solve: InnerSolve,
) -> Result<f64> {
    if coupling.coefficients().len() != uf.nominal.len() {
        return Err(Error::Shape("coupling and nominal value differ in length".into()));
    }
    let base = model.local_cost(w_self, data)?;
    let spec = &uf.bound;
    let at_nominal = base + coupling.value(&uf.nominal) + spec.delta;
    if spec.epsilon == 0.0 {
        return Ok(at_nominal);
    }
    match (solve, coupling) {
        (InnerSolve::ClosedForm, Coupling::Linear { coefficients }) => {
            Ok(base + coefficients.dot(&uf.nominal) + protection_term(spec, coefficients))
        }
        (InnerSolve::ClosedForm, _) => Err(Error::Unsupported(
            "closed-form worst case needs a linear coupling".into(),
        )),
        (InnerSolve::ProjectedAscent, _) => {
            let perturbation = ascend(coupling, uf)?;
            let value = base + coupling.value(&(&uf.nominal + perturbation)) + spec.delta;
            Ok(value.max(at_nominal))
        }
    }
}

fn ascend(coupling: &Coupling, uf: &UncertainFunction) -> Result<Vector> {
    let spec = &uf.bound;
    let mut fhat = Vector::zeros(uf.nominal.len());
    let step = match coupling {
        Coupling::ConcaveQuadratic { curvature, .. } if *curvature > 0.0 => 1.0 / curvature,
        _ => {
            let g = coupling.gradient(&uf.nominal).norm();
            if g < FLAT_GRADIENT {
                return Ok(fhat);
            }
            10.0 * spec.epsilon / g
        }
    };
    let mut last_move = f64::INFINITY;
    for _ in 0..ASCENT_MAX_ITERS {
        let g = coupling.gradient(&(&uf.nominal + &fhat));
        let next = project_onto_ball(&(&fhat + g * step), spec.p, spec.epsilon);
        last_move = (&next - &fhat).norm();
        fhat = next;
        if last_move <= ASCENT_TOLERANCE {
            return Ok(fhat);
        }
    }
    Err(Error::numeric(format!(
        "projected ascent over the p={} ball did not converge in {ASCENT_MAX_ITERS} iterations \
         (last step {last_move:.3e}, tolerance {ASCENT_TOLERANCE:.0e})",
        spec.p
    )))
}
