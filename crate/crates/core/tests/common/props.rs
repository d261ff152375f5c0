//! Similarity, margin and reduction checks shared by the tests and the
//! acceptance run. Each panics on a violation.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use tvmf_lab::losses::{info_nce_loss, supcon_loss};
use tvmf_lab::simcore::{
    angle_grid, d_tvmf_dcos, delta, invert_tvmf, kappa_from_alpha, margin_epsilon, tvmf_from_cos, SimilaritySpec,
};

use super::*;

/// Endpoint pinning, the cosine case, the sign at pi/2, monotonicity in
/// kappa and cosine, and the inverse, over `draws` random points.
pub fn similarity_identities(draws: usize, seed: u64) {
    let mut rng = rng(seed);
    for _ in 0..draws {
        let k = rng.random_range(-0.49..20.0);
        let k2 = rng.random_range(-0.49..20.0);
        let c = rng.random_range(-1.0..=1.0);
        let c2 = rng.random_range(-1.0..=1.0);
        assert_eq!(tvmf_from_cos(1.0, k).unwrap(), 1.0);
        assert_eq!(tvmf_from_cos(-1.0, k).unwrap(), -1.0);
        assert_eq!(tvmf_from_cos(c, 0.0).unwrap(), c);
        let right = tvmf_from_cos(0.0, k).unwrap();
        assert!(right * k < 0.0 || (k == 0.0 && right == 0.0), "kappa {k}: {right}");
        if c.abs() < 0.999 && (k - k2).abs() > 1e-9 {
            let (lo, hi) = if k < k2 { (k, k2) } else { (k2, k) };
            assert!(tvmf_from_cos(c, hi).unwrap() < tvmf_from_cos(c, lo).unwrap());
        }
        let (a, b) = if c < c2 { (c, c2) } else { (c2, c) };
        assert!(tvmf_from_cos(a, k).unwrap() <= tvmf_from_cos(b, k).unwrap());
        assert!(d_tvmf_dcos(c, k).unwrap() > 0.0);
        let back = invert_tvmf(tvmf_from_cos(c, k).unwrap(), k).unwrap();
        assert!((back - c).abs() <= 1e-10, "kappa {k} cos {c} back {back}");
    }
}

pub fn alpha_point_four_is_exact() {
    assert_eq!(kappa_from_alpha(0.4).unwrap(), (2.0, -0.4));
}

pub fn alpha_grid_is_symmetric_at_right_angle() {
    for i in 0..50 {
        let alpha = 0.49 * i as f64 / 49.0;
        let (kp, kn) = kappa_from_alpha(alpha).unwrap();
        let sp = tvmf_from_cos(0.0, kp).unwrap();
        let sn = tvmf_from_cos(0.0, kn).unwrap();
        assert!((sp + sn).abs() <= 1e-12, "alpha {alpha}: {sp} + {sn}");
    }
}

pub fn margin_cases() {
    let mut rng = rng(20);
    for _ in 0..1000 {
        let kn = rng.random_range(-0.45..3.0);
        let kp = kn + rng.random_range(0.05..4.0);
        let spec = SimilaritySpec::tvmf(kp, kn).unwrap();
        let psi_p = rng.random_range(0.01..PI - 0.01);
        let eps = margin_epsilon(psi_p, &spec).unwrap();
        assert!(eps > 0.0, "({kp}, {kn}) at {psi_p}: eps {eps}");
        let edge = psi_p + eps;
        assert!(edge <= PI);
        assert!(delta(psi_p, edge, &spec).unwrap().abs() <= 1e-10);
        // strictly inside the margin the loss still pushes
        assert!(delta(psi_p, psi_p + 0.5 * eps, &spec).unwrap() > 0.0);
        if PI - edge > 1e-6 {
            assert!(delta(psi_p, edge + 0.5 * (PI - edge), &spec).unwrap() < 0.0);
        }

        let same = SimilaritySpec::tvmf(kn, kn).unwrap();
        assert_eq!(margin_epsilon(psi_p, &same).unwrap(), 0.0);
    }
}

pub fn margin_example_value() {
    let spec = SimilaritySpec::tvmf(2.0, -0.4).unwrap();
    let eps = margin_epsilon(FRAC_PI_2, &spec).unwrap();
    assert!((eps - ((-12.0f64 / 13.0).acos() - FRAC_PI_2)).abs() < 1e-12);
    assert!((eps - 1.176005).abs() < 1e-6);
}

pub fn margin_vanishes_only_at_endpoints() {
    let spec = SimilaritySpec::tvmf(2.0, -0.4).unwrap();
    let grid = angle_grid(181).unwrap();
    for &psi in &grid[1..grid.len() - 1] {
        assert!(margin_epsilon(psi, &spec).unwrap() > 0.0);
    }
}

pub fn zero_kappa_loss_is_bit_identical_to_cosine_loss() {
    let mut rng = rng(21);
    let zero = SimilaritySpec::tvmf(0.0, 0.0).unwrap();
    for _ in 0..100 {
        let dim = rng.random_range(2..10);
        let a = unit_vec(&mut rng, dim);
        let pos: Vec<Vec<f64>> = (0..rng.random_range(1..5)).map(|_| unit_vec(&mut rng, dim)).collect();
        let neg: Vec<Vec<f64>> = (0..rng.random_range(0..8)).map(|_| unit_vec(&mut rng, dim)).collect();
        let p: Vec<&[f64]> = pos.iter().map(|v| v.as_slice()).collect();
        let n: Vec<&[f64]> = neg.iter().map(|v| v.as_slice()).collect();
        let tau = rng.random_range(0.1..2.0);
        let general = supcon_loss(&a, &p, &n, &zero, tau).unwrap();
        let cosine = info_nce_loss(&a, &p, &n, tau).unwrap();
        assert_eq!(general.loss.to_bits(), cosine.loss.to_bits());
        assert_eq!(general, cosine);
    }
}
