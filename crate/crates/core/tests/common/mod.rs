#![allow(dead_code)]

pub mod gradcheck;
pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values at least `margin` away from zero, for inputs fed through kinks.
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f32) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f32 = rng.random_range(margin..1.5);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect()
}

/// Distinct, well separated values in random order (keeps max-pool winners
/// stable under finite-difference perturbations).
pub fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

pub fn to64(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_TOL: f64 = 1e-3;

/// Central finite-difference gradient of `f` at `x`, evaluated in `f64`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Gradients whose norm is below this are compared on an absolute scale; some
/// inputs (a batchnorm shift feeding another batchnorm) have a true gradient of
/// zero that `f32` evaluation reproduces only up to rounding.
pub const GRAD_NORM_FLOOR: f64 = 1e-4;

/// `‖analytic − numeric‖₂ / max(‖numeric‖₂, GRAD_NORM_FLOOR)`.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm.max(GRAD_NORM_FLOOR)
}
