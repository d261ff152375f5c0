//! Training losses with analytic gradients.
//!
//! The contrastive losses are evaluated in the shifted form
//!
//! ```text
//! l_p = log(1 + sum_n exp((s_n - s_p) / tau)) = softplus(LSE_n(s_n / tau) - s_p / tau)
//! ```
//!
//! which needs one log-sum-exp over the negatives per anchor, so a queue of
//! thousands of entries costs `O(|P| + |N|)` rather than `O(|P| |N|)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, norm, Matrix};
use crate::moco::EmbeddingQueue;
use crate::simcore::{clamp_cos, SimilaritySpec};

/// Allowed deviation of an embedding row norm from 1.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Smallest `sin(theta)` used when differentiating `cos(theta + m)`.
const MIN_SIN: f64 = 1e-6;

/// Classification loss variant.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DroConfig {
    None,
    Robust { step_size: f64 },
    Cvar { fraction: f64 },
}

impl Default for DroConfig {
    fn default() -> Self {
        DroConfig::None
    }
}

impl DroConfig {
    pub fn robust() -> Self {
        DroConfig::Robust { step_size: 0.01 }
    }

    pub fn cvar() -> Self {
        DroConfig::Cvar { fraction: 0.5 }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self, DroConfig::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub supcon_weight: f64,
    /// Angular margin added to positive angles, radians. `0` disables it.
    pub fixed_margin: f64,
    pub dro: DroConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            supcon_weight: 1.0,
            fixed_margin: 0.0,
            dro: DroConfig::None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, similarity: &SimilaritySpec) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("loss.temperature", "must be > 0"));
        }
        if !(self.supcon_weight >= 0.0 && self.supcon_weight.is_finite()) {
            return Err(Error::config("loss.supcon_weight", "must be >= 0"));
        }
        if !(self.fixed_margin >= 0.0 && self.fixed_margin <= PI) {
            return Err(Error::config("loss.fixed_margin", "must lie in [0, pi]"));
        }
        if self.fixed_margin > 0.0 && similarity.is_heterogeneous() {
            return Err(Error::config(
                "loss.fixed_margin",
                "a fixed margin cannot be combined with kappa_p != kappa_n",
            ));
        }
        match self.dro {
            DroConfig::None => {}
            DroConfig::Robust { step_size } => {
                if !(step_size > 0.0 && step_size.is_finite()) {
                    return Err(Error::config("loss.dro.step_size", "must be > 0"));
                }
            }
            DroConfig::Cvar { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::config("loss.dro.fraction", "must lie in (0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Pairwise similarity the contrastive loss should use under this config.
    pub fn pair_similarity(&self, similarity: &SimilaritySpec) -> PairSimilarity {
        if self.fixed_margin > 0.0 {
            PairSimilarity::FixedMargin(self.fixed_margin)
        } else {
            PairSimilarity::Spec(*similarity)
        }
    }
}

/// Similarity of anchor/positive and anchor/negative pairs as a function of
/// their cosine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairSimilarity {
    /// Plain cosine on both sides.
    Cosine,
    /// t-vMF with `kappa_p` / `kappa_n`.
    Spec(SimilaritySpec),
    /// `cos(theta_p + m)` for positives, cosine for negatives.
    FixedMargin(f64),
}

impl PairSimilarity {
    #[inline]
    fn positive(&self, c: f64) -> (f64, f64) {
        match self {
            PairSimilarity::Cosine => (c, 1.0),
            PairSimilarity::Spec(s) => s.positive(c),
            PairSimilarity::FixedMargin(m) => shifted_cos(c, *m),
        }
    }

    #[inline]
    fn negative(&self, c: f64) -> (f64, f64) {
        match self {
            PairSimilarity::Cosine | PairSimilarity::FixedMargin(_) => (c, 1.0),
            PairSimilarity::Spec(s) => s.negative(c),
        }
    }
}

/// `cos(acos(c) + m)` with `theta + m` clamped to `pi`, and its derivative
/// in `c`.
#[inline]
fn shifted_cos(c: f64, m: f64) -> (f64, f64) {
    if m == 0.0 {
        return (c, 1.0);
    }
    let theta = c.acos();
    let t = theta + m;
    if t >= PI {
        return (-1.0, 0.0);
    }
    let sin_theta = (1.0 - c * c).max(0.0).sqrt().max(MIN_SIN);
    (t.cos(), t.sin() / sin_theta)
}

/// Unit-norm embedding rows with their labels, groups and domains.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub domains: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(
        embeddings: Matrix,
        labels: Vec<usize>,
        groups: Vec<usize>,
        domains: Vec<usize>,
    ) -> Result<Self> {
        let n = embeddings.rows();
        if n == 0 {
            return Err(Error::Contract("embedding batch is empty".into()));
        }
        if labels.len() != n || groups.len() != n || domains.len() != n {
            return Err(Error::Shape(format!(
                "batch of {n} rows with {} labels, {} groups, {} domains",
                labels.len(),
                groups.len(),
                domains.len()
            )));
        }
        for (i, row) in embeddings.iter_rows().enumerate() {
            check_unit(row).map_err(|_| {
                Error::Contract(format!("embedding row {i} has norm {}", norm(row)))
            })?;
        }
        Ok(Self {
            embeddings,
            labels,
            groups,
            domains,
        })
    }

    /// Batch carrying labels only; groups and domains are zero.
    pub fn from_labels(embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        let n = labels.len();
        Self::new(embeddings, labels, vec![0; n], vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub(crate) fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() <= UNIT_NORM_TOL {
        Ok(())
    } else {
        Err(Error::Contract(format!("expected a unit vector, norm is {n}")))
    }
}

/// Loss and derivatives w.r.t. the positive and negative cosines.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineGrads {
    pub loss: f64,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
}

#[inline]
fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Contrastive loss of one anchor from its (clamped) cosines to the
/// positives and negatives.
pub fn contrastive_from_cosines(
    c_pos: &[f64],
    c_neg: &[f64],
    sim: &PairSimilarity,
    temperature: f64,
) -> Result<CosineGrads> {
    if c_pos.is_empty() {
        return Err(Error::Contract("contrastive loss needs at least one positive".into()));
    }
    let inv_t = 1.0 / temperature;

    let neg: Vec<(f64, f64)> = c_neg.iter().map(|&c| sim.negative(c)).collect();
    let mut max_n = f64::NEG_INFINITY;
    for &(s, _) in &neg {
        max_n = max_n.max(s * inv_t);
    }
    // shifted exponentials, reused for the softmax weights below
    let exps: Vec<f64> = neg.iter().map(|&(s, _)| (s * inv_t - max_n).exp()).collect();
    let sum_n: f64 = exps.iter().sum();
    let lse_n = if neg.is_empty() {
        f64::NEG_INFINITY
    } else {
        max_n + sum_n.ln()
    };

    let scale = 1.0 / c_pos.len() as f64;
    let mut loss = 0.0;
    let mut r_total = 0.0;
    let mut d_pos = Vec::with_capacity(c_pos.len());
    for &c in c_pos {
        let (s, ds) = sim.positive(c);
        let u = lse_n - s * inv_t;
        let r = sigmoid(u);
        loss += softplus(u);
        r_total += r;
        d_pos.push(-r * inv_t * scale * ds);
    }
    loss *= scale;

    let k = r_total * scale * inv_t / sum_n;
    let d_neg = neg.iter().zip(&exps).map(|(&(_, ds), &e)| k * e * ds).collect();
    Ok(CosineGrads { loss, d_pos, d_neg })
}

/// Loss of one anchor and the gradients w.r.t. every input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positives: Vec<Vec<f64>>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// Contrastive loss for a single anchor.
///
/// Inputs must be unit vectors; similarities are taken from their dot
/// products, so the returned gradients are w.r.t. the unit vectors
/// themselves. Callers that normalize pre-images apply the normalization
/// Jacobian.
pub fn contrastive_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    sim: &PairSimilarity,
    temperature: f64,
) -> Result<ContrastiveOutput> {
    if positives.is_empty() {
        return Err(Error::Contract("contrastive loss needs at least one positive".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
    }
    let dim = anchor.len();
    check_unit(anchor)?;
    for v in positives.iter().chain(negatives) {
        if v.len() != dim {
            return Err(Error::Shape(format!("vector of length {} against anchor {dim}", v.len())));
        }
        check_unit(v)?;
    }
    let c_pos: Vec<f64> = positives.iter().map(|p| clamp_cos(dot(anchor, p))).collect();
    let c_neg: Vec<f64> = negatives.iter().map(|n| clamp_cos(dot(anchor, n))).collect();
    let g = contrastive_from_cosines(&c_pos, &c_neg, sim, temperature)?;

    let mut grad_anchor = vec![0.0; dim];
    for (p, &d) in positives.iter().zip(&g.d_pos) {
        axpy(d, p, &mut grad_anchor);
    }
    for (n, &d) in negatives.iter().zip(&g.d_neg) {
        axpy(d, n, &mut grad_anchor);
    }
    let scaled = |d: f64| anchor.iter().map(|a| d * a).collect::<Vec<_>>();
    Ok(ContrastiveOutput {
        loss: g.loss,
        grad_anchor,
        grad_positives: g.d_pos.iter().map(|&d| scaled(d)).collect(),
        grad_negatives: g.d_neg.iter().map(|&d| scaled(d)).collect(),
    })
}

/// Contrastive loss with cosine similarity on both sides.
pub fn info_nce_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    temperature: f64,
) -> Result<ContrastiveOutput> {
    contrastive_loss(anchor, positives, negatives, &PairSimilarity::Cosine, temperature)
}

/// Contrastive loss with t-vMF similarity, `kappa_p` on positives and
/// `kappa_n` on negatives.
pub fn supcon_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    spec: &SimilaritySpec,
    temperature: f64,
) -> Result<ContrastiveOutput> {
    contrastive_loss(anchor, positives, negatives, &PairSimilarity::Spec(*spec), temperature)
}

/// Cosine contrastive loss with `cos(theta_p + m)` on the positive side.
pub fn fixed_margin_supcon(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    margin: f64,
    temperature: f64,
) -> Result<ContrastiveOutput> {
    if !(margin >= 0.0) {
        return Err(Error::Domain(format!("margin must be >= 0, got {margin}")));
    }
    contrastive_loss(
        anchor,
        positives,
        negatives,
        &PairSimilarity::FixedMargin(margin),
        temperature,
    )
}

/// Batch contrastive loss against a queue.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchContrastive {
    /// Mean over contributing anchors; `0` when none contributed.
    pub loss: f64,
    /// Gradient w.r.t. the batch embeddings. Queue entries get none.
    pub grad: Matrix,
    pub contributing: usize,
    pub skipped: usize,
}

impl BatchContrastive {
    pub fn no_positives(&self) -> bool {
        self.contributing == 0
    }
}

/// Per-anchor contrastive loss where positives are queue entries with the
/// same label and negatives those with a different label.
///
/// Anchors without a same-label entry in the queue are skipped and counted.
pub fn supcon_batch_loss(
    batch: &EmbeddingBatch,
    queue: &EmbeddingQueue,
    sim: &PairSimilarity,
    temperature: f64,
) -> Result<BatchContrastive> {
    let n = batch.len();
    let dim = batch.embeddings.cols();
    if queue.is_empty() {
        return Err(Error::Contract("contrastive loss against an empty queue".into()));
    }
    if queue.dim() != dim {
        return Err(Error::Shape(format!(
            "queue stores {}-d embeddings, batch has {dim}",
            queue.dim()
        )));
    }
    let mut grad = Matrix::zeros(n, dim);
    let mut loss = 0.0;
    let mut contributing = 0;
    let mut skipped = 0;

    let fill = queue.len();
    let mut c_pos = Vec::with_capacity(fill);
    let mut c_neg = Vec::with_capacity(fill);
    let mut pos_idx = Vec::with_capacity(fill);
    let mut neg_idx = Vec::with_capacity(fill);
    for i in 0..n {
        let anchor = batch.embeddings.row(i);
        let label = batch.labels[i];
        c_pos.clear();
        c_neg.clear();
        pos_idx.clear();
        neg_idx.clear();
        for slot in 0..fill {
            let (e, l) = queue.entry(slot);
            let c = clamp_cos(dot(anchor, e));
            if l == label {
                c_pos.push(c);
                pos_idx.push(slot);
            } else {
                c_neg.push(c);
                neg_idx.push(slot);
            }
        }
        if c_pos.is_empty() {
            skipped += 1;
            continue;
        }
        let g = contrastive_from_cosines(&c_pos, &c_neg, sim, temperature)?;
        loss += g.loss;
        contributing += 1;
        let row = grad.row_mut(i);
        for (&slot, &d) in pos_idx.iter().zip(&g.d_pos) {
            axpy(d, queue.entry(slot).0, row);
        }
        for (&slot, &d) in neg_idx.iter().zip(&g.d_neg) {
            axpy(d, queue.entry(slot).0, row);
        }
    }
    if contributing > 0 {
        let s = 1.0 / contributing as f64;
        loss *= s;
        grad.scale(s);
    }
    Ok(BatchContrastive {
        loss,
        grad,
        contributing,
        skipped,
    })
}

/// Per-sample cross-entropy terms.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleCe {
    pub losses: Vec<f64>,
    /// `softmax - onehot` per row, not divided by the batch size.
    pub grads: Matrix,
}

impl PerSampleCe {
    /// Logit gradient of `sum_i w_i * loss_i`.
    pub fn weighted_grad(&self, weights: &[f64]) -> Matrix {
        let mut g = self.grads.clone();
        for (i, &w) in weights.iter().enumerate() {
            g.row_mut(i).iter_mut().for_each(|v| *v *= w);
        }
        g
    }
}

pub fn cross_entropy_per_sample(logits: &Matrix, labels: &[usize]) -> Result<PerSampleCe> {
    let (n, c) = (logits.rows(), logits.cols());
    if c < 2 {
        return Err(Error::Shape(format!("cross entropy needs >= 2 classes, got {c}")));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} logit rows, {} labels", labels.len())));
    }
    let mut losses = Vec::with_capacity(n);
    let mut grads = Matrix::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Contract(format!("label {y} outside [0, {c})")));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        losses.push(lse - row[y]);
        let g = grads.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - lse).exp();
        }
        g[y] -= 1.0;
    }
    Ok(PerSampleCe { losses, grads })
}

/// Mean cross entropy and its logit gradient.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let per = cross_entropy_per_sample(logits, labels)?;
    let n = per.losses.len();
    if n == 0 {
        return Err(Error::Shape("cross entropy of an empty batch".into()));
    }
    let w = 1.0 / n as f64;
    let loss = per.losses.iter().sum::<f64>() * w;
    let mut g = per.grads;
    g.scale(w);
    Ok((loss, g))
}

/// Adversarial group weights for Robust-DRO.
#[derive(Debug, Clone, PartialEq)]
pub struct DroState {
    group_weights: Vec<f64>,
    step_size: f64,
}

impl DroState {
    pub fn uniform(num_groups: usize, step_size: f64) -> Result<Self> {
        if num_groups == 0 {
            return Err(Error::Domain("DRO needs at least one group".into()));
        }
        if !(step_size > 0.0 && step_size.is_finite()) {
            return Err(Error::Domain(format!("DRO step size must be > 0, got {step_size}")));
        }
        Ok(Self {
            group_weights: vec![1.0 / num_groups as f64; num_groups],
            step_size,
        })
    }

    pub fn with_weights(group_weights: Vec<f64>, step_size: f64) -> Result<Self> {
        let sum: f64 = group_weights.iter().sum();
        if group_weights.is_empty()
            || group_weights.iter().any(|w| !(*w >= 0.0))
            || (sum - 1.0).abs() > 1e-12
        {
            return Err(Error::Domain("group weights must be nonnegative and sum to 1".into()));
        }
        let mut s = Self::uniform(group_weights.len(), step_size)?;
        s.group_weights = group_weights;
        Ok(s)
    }

    pub fn weights(&self) -> &[f64] {
        &self.group_weights
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }
}

/// Output of a group-robust reduction of per-sample losses.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLoss {
    pub loss: f64,
    /// `d loss / d loss_i`.
    pub sample_weights: Vec<f64>,
}

/// One exponentiated-gradient step on the group weights, then the weighted
/// sum of group mean losses under the new weights.
pub fn robust_dro_step(losses: &[f64], groups: &[usize], state: &mut DroState) -> Result<WeightedLoss> {
    if losses.is_empty() {
        return Err(Error::Contract("robust DRO on an empty batch".into()));
    }
    if losses.len() != groups.len() {
        return Err(Error::Shape(format!("{} losses, {} group ids", losses.len(), groups.len())));
    }
    if let Some(i) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Domain(format!("non-finite loss {} at sample {i}", losses[i])));
    }
    let g_count = state.group_weights.len();
    let mut sums = vec![0.0; g_count];
    let mut counts = vec![0usize; g_count];
    for (&l, &g) in losses.iter().zip(groups) {
        if g >= g_count {
            return Err(Error::Contract(format!("group id {g} outside [0, {g_count})")));
        }
        sums[g] += l;
        counts[g] += 1;
    }
    let means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();

    // log-domain update so large losses cannot overflow
    let logits: Vec<f64> = state
        .group_weights
        .iter()
        .zip(&means)
        .map(|(&w, &m)| w.ln() + state.step_size * m)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    state.group_weights = unnorm.iter().map(|&u| u / total).collect();

    let loss = state.group_weights.iter().zip(&means).map(|(w, m)| w * m).sum();
    let sample_weights = groups
        .iter()
        .map(|&g| state.group_weights[g] / counts[g] as f64)
        .collect();
    Ok(WeightedLoss {
        loss,
        sample_weights,
    })
}

/// CVaR reduction of per-sample losses.
#[derive(Debug, Clone, PartialEq)]
pub struct CvarLoss {
    pub loss: f64,
    pub mask: Vec<bool>,
    pub sample_weights: Vec<f64>,
}

/// Mean of the `ceil(q n)` largest losses; ties at the cutoff go to the
/// lowest sample index.
pub fn cvar_dro(losses: &[f64], fraction: f64) -> Result<CvarLoss> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("CVaR fraction must lie in (0, 1], got {fraction}")));
    }
    let n = losses.len();
    if n == 0 {
        return Err(Error::Contract("CVaR on an empty batch".into()));
    }
    // the epsilon absorbs products like 0.3 * 10 = 3.0000000000000004
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    let mut sum = 0.0;
    for &i in &order[..k] {
        mask[i] = true;
        sum += losses[i];
    }
    let w = 1.0 / k as f64;
    let sample_weights = mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
    Ok(CvarLoss {
        loss: sum * w,
        mask,
        sample_weights,
    })
}
