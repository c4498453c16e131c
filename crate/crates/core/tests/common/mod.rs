#![allow(dead_code)]

use istseg::pipeline::PhantomConfig;
use istseg::{Dims, ScalarField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform noise in `[-1, 1)`.
pub fn noise(dims: Dims, seed: u64) -> ScalarField<f64> {
    let mut r = rng(seed);
    ScalarField::from_fn(dims, |_, _, _| r.gen::<f64>() * 2.0 - 1.0)
}

/// Smooth random field: a few low-frequency sinusoids plus a ramp.
pub fn smooth_field(dims: Dims, seed: u64) -> ScalarField<f64> {
    let mut r = rng(seed);
    let terms: Vec<[f64; 5]> = (0..4)
        .map(|_| {
            [
                r.gen_range(0.2..0.8),
                r.gen_range(0.2..0.8),
                r.gen_range(0.2..0.8),
                r.gen_range(0.0..6.3),
                r.gen_range(0.5..1.0),
            ]
        })
        .collect();
    ScalarField::from_fn(dims, |x, y, z| {
        terms
            .iter()
            .map(|t| t[4] * (t[0] * x as f64 + t[1] * y as f64 + t[2] * z as f64 + t[3]).sin())
            .sum::<f64>()
            + 0.05 * x as f64
    })
}

/// Max over components of `|a - f| / max(|a|, |f|, floor)` where `floor` is
/// `1e-3` of the largest finite-difference magnitude, so components that are
/// numerically zero do not dominate.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let peak = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * peak).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

pub fn small_phantom_config(side: usize) -> PhantomConfig {
    PhantomConfig {
        dims: Dims::new_2d(side, side),
        ..PhantomConfig::default()
    }
}
