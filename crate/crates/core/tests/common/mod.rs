#![allow(dead_code)]

pub mod grad;
pub mod oracle;
pub mod props;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn unit_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    normalize(&gaussian_vec(rng, n))
}

/// Relative error; below magnitude 1e-4 it becomes an absolute error scaled by 1e4.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-4)
}

/// Five-point central difference of `f` at `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let old = x[i];
    let mut at = |d: f64| {
        x[i] = old + d;
        f(x)
    };
    let v = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
    x[i] = old;
    v
}

/// Pulls a gradient w.r.t. a unit vector `u = x / |x|` back to `x`.
pub fn through_normalize(x: &[f64], g_unit: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let u: Vec<f64> = x.iter().map(|v| v / n).collect();
    let ug: f64 = u.iter().zip(g_unit).map(|(a, b)| a * b).sum();
    g_unit.iter().zip(&u).map(|(g, ui)| (g - ui * ug) / n).collect()
}
