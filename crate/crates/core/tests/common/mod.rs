#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use robustfed::uncertainty::lp_norm;
use robustfed::{CostModel, Family, LabeledDataset, Matrix, Vector, WeightVector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_vector(rng: &mut ChaCha8Rng, dim: usize, half_width: f64) -> Vector {
    Vector::from_fn(dim, |_, _| rng.random_range(-half_width..half_width))
}

pub fn random_weights(rng: &mut ChaCha8Rng, dim: usize, half_width: f64) -> WeightVector {
    random_vector(rng, dim, half_width).into()
}

/// Gaussian features with labels valid for the family.
pub fn random_dataset(rng: &mut ChaCha8Rng, family: Family, samples: usize, features: usize) -> LabeledDataset {
    let x = Matrix::from_fn(samples, features, |_, _| normal(rng));
    let labels = (0..samples)
        .map(|_| match family {
            Family::LinearRegression => normal(rng),
            Family::LogisticBinary | Family::HingeSvm => {
                if rng.random_bool(0.5) { 1.0 } else { -1.0 }
            }
            Family::LogisticMulticlass { classes } => rng.random_range(0..classes) as f64,
        })
        .collect();
    LabeledDataset::new(x, labels).unwrap()
}

pub fn smooth_families() -> Vec<Family> {
    vec![
        Family::LinearRegression,
        Family::LogisticBinary,
        Family::LogisticMulticlass { classes: 3 },
    ]
}

pub fn model_for(family: Family, features: usize) -> CostModel {
    CostModel::new(family, features).unwrap()
}

/// Central differences with step `h`.
pub fn fd_gradient(f: impl Fn(&WeightVector) -> f64, w: &WeightVector, h: f64) -> Vector {
    Vector::from_fn(w.len(), |i, _| {
        let mut up = w.as_vector().clone();
        up[i] += h;
        let mut down = w.as_vector().clone();
        down[i] -= h;
        (f(&up.into()) - f(&down.into())) / (2.0 * h)
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Vector, b: &Vector) -> f64 {
    let scale = a.norm().max(b.norm());
    if scale == 0.0 { 0.0 } else { (a - b).norm() / scale }
}

/// A random point on the `p`-sphere of the given radius. A random exponent
/// sharpens the draw toward sparse directions so vertices of the `ℓ₁` ball
/// are reached as often as smooth parts of the sphere.
pub fn sphere_sample(rng: &mut ChaCha8Rng, dim: usize, p: f64, radius: f64) -> Vector {
    let gamma = rng.random_range(1.0..6.0);
    let g = Vector::from_fn(dim, |_, _| {
        let z = normal(rng);
        z.signum() * z.abs().powf(gamma)
    });
    let n = lp_norm(g.as_slice(), p);
    g * (radius / n)
}

/// Supremum of `objective` over the `p`-ball of the given radius, estimated
/// from `samples` draws: a tenth are global, the rest perturb the incumbent
/// with a shrinking radius. With `on_sphere` every draw is pushed out to
/// the sphere; otherwise only infeasible draws are scaled back onto it.
pub fn monte_carlo_sup(
    objective: impl Fn(&Vector) -> f64,
    dim: usize,
    p: f64,
    radius: f64,
    samples: usize,
    seed: u64,
    on_sphere: bool,
) -> (f64, Vector) {
    let mut rng = rng(seed);
    let global = samples / 10;
    let mut best_f = sphere_sample(&mut rng, dim, p, radius);
    let mut best = objective(&best_f);
    for _ in 1..global {
        let mut f = sphere_sample(&mut rng, dim, p, radius);
        if !on_sphere {
            f *= rng.random_range(0.0f64..1.0).powf(1.0 / dim as f64);
        }
        let v = objective(&f);
        if v > best {
            best = v;
            best_f = f;
        }
    }
    let local = samples - global;
    for k in 0..local {
        let scale = radius * 0.5 * (1.0 - k as f64 / local as f64).powi(3) + 1e-9;
        let trial = &best_f + Vector::from_fn(dim, |_, _| normal(&mut rng) * scale);
        let n = lp_norm(trial.as_slice(), p);
        if n == 0.0 {
            continue;
        }
        let f = if on_sphere || n > radius { trial * (radius / n) } else { trial };
        let v = objective(&f);
        if v > best {
            best = v;
            best_f = f;
        }
    }
    (best, best_f)
}
