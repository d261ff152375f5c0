//! Closed-form similarity mathematics.
//!
//! The t-vMF similarity of two vectors with cosine `c` is
//!
//! ```text
//! phi_k(c) = (1 + c) / (1 + k (1 - c)) - 1,   k in (-1/2, inf)
//! ```
//!
//! It is pinned to `1` at `c = 1` and `-1` at `c = -1` for every `k`,
//! reduces to the cosine at `k = 0`, and decreases pointwise as `k` grows.
//! Using a larger `k` for positive comparisons than for negative ones opens
//! an angular margin between the two, computed here by [`margin_epsilon`].

use std::f64::consts::PI;
use std::io::Write;

use crate::error::{Error, Result};
use crate::matrix::dot;

/// Lower (open) bound of the t-vMF concentration parameter.
pub const KAPPA_MIN: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Cosine,
    Tvmf,
}

/// Which formula turns the single parameter `alpha` into `(kappa_p, kappa_n)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMapping {
    /// `kappa_p = alpha / (1 - 2 alpha)`: solves the symmetry condition
    /// `phi_kp(0) = -phi_kn(0)` and gives `(2.0, -0.4)` at `alpha = 0.4`.
    #[default]
    Symmetric,
    /// `kappa_p = alpha / (2 alpha + 1)`, kept for comparison only.
    Printed,
}

/// Similarity used by the contrastive loss, with separate concentration
/// parameters for positive and negative comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilaritySpec {
    kind: SimilarityKind,
    kappa_p: f64,
    kappa_n: f64,
    alpha: Option<f64>,
}

impl SimilaritySpec {
    pub fn cosine() -> Self {
        Self {
            kind: SimilarityKind::Cosine,
            kappa_p: 0.0,
            kappa_n: 0.0,
            alpha: None,
        }
    }

    pub fn tvmf(kappa_p: f64, kappa_n: f64) -> Result<Self> {
        check_kappa(kappa_p)?;
        check_kappa(kappa_n)?;
        Ok(Self {
            kind: SimilarityKind::Tvmf,
            kappa_p,
            kappa_n,
            alpha: None,
        })
    }

    /// Same concentration on both sides.
    pub fn homogeneous(kappa: f64) -> Result<Self> {
        Self::tvmf(kappa, kappa)
    }

    pub fn from_alpha(alpha: f64) -> Result<Self> {
        Self::from_alpha_with(alpha, AlphaMapping::Symmetric)
    }

    pub fn from_alpha_with(alpha: f64, mapping: AlphaMapping) -> Result<Self> {
        let (kappa_p, kappa_n) = match mapping {
            AlphaMapping::Symmetric => kappa_from_alpha(alpha)?,
            AlphaMapping::Printed => kappa_from_alpha_printed(alpha)?,
        };
        Ok(Self {
            kind: SimilarityKind::Tvmf,
            kappa_p,
            kappa_n,
            alpha: Some(alpha),
        })
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn kappa_p(&self) -> f64 {
        self.kappa_p
    }

    pub fn kappa_n(&self) -> f64 {
        self.kappa_n
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    /// Similarity and its derivative w.r.t. the cosine, positive side.
    #[inline]
    pub fn positive(&self, c: f64) -> (f64, f64) {
        eval_unchecked(c, self.kappa_p)
    }

    /// Similarity and its derivative w.r.t. the cosine, negative side.
    #[inline]
    pub fn negative(&self, c: f64) -> (f64, f64) {
        eval_unchecked(c, self.kappa_n)
    }

    pub fn is_heterogeneous(&self) -> bool {
        self.kappa_p != self.kappa_n
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa.is_finite() && kappa > KAPPA_MIN {
        Ok(())
    } else {
        Err(Error::Domain(format!("kappa must lie in (-1/2, inf), got {kappa}")))
    }
}

fn check_unit_interval(name: &str, v: f64) -> Result<()> {
    if (-1.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must lie in [-1, 1], got {v}")))
    }
}

fn check_angle(name: &str, psi: f64) -> Result<()> {
    if (0.0..=PI).contains(&psi) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must lie in [0, pi], got {psi}")))
    }
}

// kappa == 0 short-circuits so the cosine case is bit-exact.
#[inline]
fn eval_unchecked(c: f64, kappa: f64) -> (f64, f64) {
    if kappa == 0.0 {
        return (c, 1.0);
    }
    let den = 1.0 + kappa * (1.0 - c);
    ((1.0 + c) / den - 1.0, (1.0 + 2.0 * kappa) / (den * den))
}

/// Cosine similarity, clamped into `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "cosine needs equal nonzero lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine of a zero-norm vector".into()));
    }
    Ok(clamp_cos(dot(a, b) / (na * nb)))
}

/// Clamps round-off excursions of a cosine back into `[-1, 1]`.
#[inline]
pub fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0, 1.0)
}

pub fn tvmf_from_cos(c: f64, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    check_unit_interval("cosine", c)?;
    Ok(eval_unchecked(c, kappa).0)
}

pub fn tvmf(a: &[f64], b: &[f64], kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    tvmf_from_cos(cosine(a, b)?, kappa)
}

/// Derivative of the t-vMF similarity with respect to the cosine.
pub fn d_tvmf_dcos(c: f64, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    check_unit_interval("cosine", c)?;
    Ok(eval_unchecked(c, kappa).1)
}

/// Closed-form inverse: the cosine whose t-vMF similarity is `s`.
pub fn invert_tvmf(s: f64, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    check_unit_interval("similarity", s)?;
    let u = s + 1.0;
    let c = (u * (1.0 + kappa) - 1.0) / (1.0 + u * kappa);
    Ok(c.clamp(-1.0, 1.0))
}

/// Single-parameter control: `kappa_n = -alpha`, `kappa_p = alpha / (1 - 2 alpha)`.
pub fn kappa_from_alpha(alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    // 1 / (1/alpha - 2) keeps exact values such as 0.4 -> 2.0
    let kappa_p = if alpha == 0.0 { 0.0 } else { 1.0 / (1.0 / alpha - 2.0) };
    Ok((kappa_p, -alpha))
}

/// The alternative mapping `kappa_p = alpha / (2 alpha + 1)`. It does not
/// satisfy the symmetry condition at `pi/2`; exposed for comparison runs.
pub fn kappa_from_alpha_printed(alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    Ok((alpha / (2.0 * alpha + 1.0), -alpha))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..0.5).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Domain(format!("alpha must lie in [0, 1/2), got {alpha}")))
    }
}

/// `phi_kn(cos psi_n) - phi_kp(cos psi_p)`: the exponent the loss drives down.
pub fn delta(psi_p: f64, psi_n: f64, spec: &SimilaritySpec) -> Result<f64> {
    check_angle("psi_p", psi_p)?;
    check_angle("psi_n", psi_n)?;
    let sn = spec.negative(psi_n.cos()).0;
    let sp = spec.positive(psi_p.cos()).0;
    Ok(sn - sp)
}

/// Angular gap `eps` such that `delta(psi_p, psi_p + eps) = 0`.
///
/// Requires `kappa_p >= kappa_n` and `psi_p` strictly inside `(0, pi)`.
pub fn margin_epsilon(psi_p: f64, spec: &SimilaritySpec) -> Result<f64> {
    if !(psi_p > 0.0 && psi_p < PI) {
        return Err(Error::Domain(format!("psi_p must lie in (0, pi), got {psi_p}")));
    }
    margin_unchecked(psi_p, spec)
}

fn margin_unchecked(psi_p: f64, spec: &SimilaritySpec) -> Result<f64> {
    if spec.kappa_p < spec.kappa_n {
        return Err(Error::Contract(format!(
            "margin requested with kappa_p {} < kappa_n {}",
            spec.kappa_p, spec.kappa_n
        )));
    }
    if spec.kappa_p == spec.kappa_n {
        return Ok(0.0);
    }
    let sp = spec.positive(psi_p.cos()).0.clamp(-1.0, 1.0);
    let cn = invert_tvmf(sp, spec.kappa_n)?;
    Ok(cn.acos() - psi_p)
}

/// A `(psi_p, psi_n)` pair evaluated under a similarity spec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginQuery {
    pub psi_p: f64,
    pub psi_n: f64,
    pub delta: f64,
    pub epsilon: f64,
}

impl MarginQuery {
    pub fn evaluate(psi_p: f64, psi_n: f64, spec: &SimilaritySpec) -> Result<Self> {
        let delta = delta(psi_p, psi_n, spec)?;
        let epsilon = margin_epsilon(psi_p, spec)?;
        Ok(Self {
            psi_p,
            psi_n,
            delta,
            epsilon,
        })
    }
}

/// Evenly spaced angles over `[0, pi]`, endpoints included.
pub fn angle_grid(resolution: usize) -> Result<Vec<f64>> {
    if resolution < 2 {
        return Err(Error::Domain("curve resolution must be at least 2".into()));
    }
    let last = (resolution - 1) as f64;
    Ok((0..resolution)
        .map(|i| if i + 1 == resolution { PI } else { PI * i as f64 / last })
        .collect())
}

/// Writes `angle_rad,kappa,similarity` rows for every kappa.
pub fn write_similarity_curves<W: Write>(
    mut out: W,
    kappas: &[f64],
    resolution: usize,
) -> Result<()> {
    let grid = angle_grid(resolution)?;
    for &k in kappas {
        check_kappa(k)?;
    }
    writeln!(out, "angle_rad,kappa,similarity")?;
    for &k in kappas {
        for &a in &grid {
            let s = tvmf_from_cos(a.cos().clamp(-1.0, 1.0), k)?;
            writeln!(out, "{a},{k},{s}")?;
        }
    }
    Ok(())
}

/// Writes `psi_p_rad,kappa_p,kappa_n,epsilon` rows for every pair.
///
/// The margin vanishes at both endpoint angles, where the similarity is
/// pinned for every kappa.
pub fn write_margin_curves<W: Write>(
    mut out: W,
    pairs: &[(f64, f64)],
    resolution: usize,
) -> Result<()> {
    let grid = angle_grid(resolution)?;
    let specs = pairs
        .iter()
        .map(|&(kp, kn)| SimilaritySpec::tvmf(kp, kn))
        .collect::<Result<Vec<_>>>()?;
    writeln!(out, "psi_p_rad,kappa_p,kappa_n,epsilon")?;
    for spec in &specs {
        for &psi in &grid {
            let eps = if psi == 0.0 || psi == PI {
                0.0
            } else {
                margin_unchecked(psi, spec)?
            };
            writeln!(out, "{psi},{},{},{eps}", spec.kappa_p, spec.kappa_n)?;
        }
    }
    Ok(())
}
