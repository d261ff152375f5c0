//! Finite-difference checks shared by the gradient tests and the
//! acceptance run. Each returns the worst relative error it saw.

use rand::Rng;
use tvmf_lab::losses::{
    cross_entropy, cross_entropy_per_sample, cvar_dro, fixed_margin_supcon, robust_dro_step, supcon_batch_loss,
    supcon_loss, ContrastiveOutput, DroState, EmbeddingBatch, PairSimilarity,
};
use tvmf_lab::moco::EmbeddingQueue;
use tvmf_lab::net::{backward, forward, NetworkParams};
use tvmf_lab::simcore::SimilaritySpec;
use tvmf_lab::Matrix;

use super::*;

pub const TOL: f64 = 1e-5;
const H: f64 = 1e-4;

type LossFn<'a> = dyn Fn(&[f64], &[&[f64]], &[&[f64]]) -> ContrastiveOutput + 'a;

struct Triplet {
    dim: usize,
    n_pos: usize,
    raw: Vec<f64>,
}

impl Triplet {
    fn random<R: Rng>(rng: &mut R) -> Self {
        let dim = rng.random_range(3..8);
        let n_pos = rng.random_range(1..4);
        let n_neg = rng.random_range(0..6);
        let raw = gaussian_vec(rng, dim * (1 + n_pos + n_neg));
        Self { dim, n_pos, raw }
    }

    fn units(raw: &[f64], dim: usize) -> Vec<Vec<f64>> {
        raw.chunks(dim).map(normalize).collect()
    }

    /// Evaluates `loss` on the normalized anchor, positives and negatives.
    fn eval(raw: &[f64], dim: usize, n_pos: usize, loss: &LossFn) -> ContrastiveOutput {
        let u = Self::units(raw, dim);
        let pos: Vec<&[f64]> = u[1..1 + n_pos].iter().map(|v| v.as_slice()).collect();
        let neg: Vec<&[f64]> = u[1 + n_pos..].iter().map(|v| v.as_slice()).collect();
        loss(&u[0], &pos, &neg)
    }

    fn check(&mut self, loss: &LossFn) -> f64 {
        let (dim, n_pos) = (self.dim, self.n_pos);
        let out = Self::eval(&self.raw, dim, n_pos, loss);
        let mut unit_grads = vec![out.grad_anchor.clone()];
        unit_grads.extend(out.grad_positives.iter().cloned());
        unit_grads.extend(out.grad_negatives.iter().cloned());
        let analytic: Vec<f64> = self
            .raw
            .chunks(dim)
            .zip(&unit_grads)
            .flat_map(|(x, g)| through_normalize(x, g))
            .collect();
        let mut worst: f64 = 0.0;
        for i in 0..self.raw.len() {
            let num = central_diff(&mut self.raw, i, H, |r| Self::eval(r, dim, n_pos, loss).loss);
            worst = worst.max(rel_err(analytic[i], num));
        }
        worst
    }
}

/// t-vMF contrastive loss with random `kappa_p`, `kappa_n` and temperature.
pub fn tvmf_supcon(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let spec = SimilaritySpec::tvmf(rng.random_range(-0.45..3.0), rng.random_range(-0.45..3.0)).unwrap();
        let tau = rng.random_range(0.1..2.0);
        let f = |a: &[f64], p: &[&[f64]], n: &[&[f64]]| supcon_loss(a, p, n, &spec, tau).unwrap();
        worst = worst.max(Triplet::random(&mut rng).check(&f));
    }
    worst
}

pub fn cosine_supcon(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let tau = rng.random_range(0.1..2.0);
        let f = |a: &[f64], p: &[&[f64]], n: &[&[f64]]| supcon_loss(a, p, n, &SimilaritySpec::cosine(), tau).unwrap();
        worst = worst.max(Triplet::random(&mut rng).check(&f));
    }
    worst
}

pub fn fixed_margin(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < instances {
        let m = rng.random_range(0.05..0.8);
        let tau = rng.random_range(0.1..2.0);
        let mut t = Triplet::random(&mut rng);
        // the shifted angle saturates at pi, where the loss has a kink
        let u = Triplet::units(&t.raw, t.dim);
        let near_kink = u[1..1 + t.n_pos].iter().any(|p| {
            let c: f64 = u[0].iter().zip(p).map(|(a, b)| a * b).sum();
            (c.clamp(-1.0, 1.0).acos() + m - std::f64::consts::PI).abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        let f = |a: &[f64], p: &[&[f64]], n: &[&[f64]]| fixed_margin_supcon(a, p, n, m, tau).unwrap();
        worst = worst.max(t.check(&f));
        checked += 1;
    }
    worst
}

fn random_logits<R: Rng>(rng: &mut R) -> (Matrix, Vec<usize>, Vec<usize>) {
    let n = rng.random_range(2..10);
    let c = rng.random_range(2..5);
    let logits = Matrix::from_vec(n, c, gaussian_vec(rng, n * c).iter().map(|v| 3.0 * v).collect()).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    let groups = (0..n).map(|_| rng.random_range(0..3)).collect();
    (logits, labels, groups)
}

fn logit_grad_err(logits: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64) -> f64 {
    let (n, c) = (logits.rows(), logits.cols());
    let mut x = logits.as_slice().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let num = central_diff(&mut x, i, H, |v| f(&Matrix::from_vec(n, c, v.to_vec()).unwrap()));
        worst = worst.max(rel_err(analytic.as_slice()[i], num));
    }
    worst
}

pub fn cross_entropy_mean(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (logits, labels, _) = random_logits(&mut rng);
        let (_, g) = cross_entropy(&logits, &labels).unwrap();
        worst = worst.max(logit_grad_err(&logits, &g, |l| cross_entropy(l, &labels).unwrap().0));
    }
    worst
}

/// Robust-DRO weighted loss with the adversary's weights held fixed, as in
/// the model update.
pub fn robust_dro(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (logits, labels, groups) = random_logits(&mut rng);
        let mut state = DroState::uniform(3, rng.random_range(0.01..1.0)).unwrap();
        let per = cross_entropy_per_sample(&logits, &labels).unwrap();
        let w = robust_dro_step(&per.losses, &groups, &mut state).unwrap();
        let weighted: f64 = w.sample_weights.iter().zip(&per.losses).map(|(a, b)| a * b).sum();
        assert!((weighted - w.loss).abs() < 1e-12);
        let g = per.weighted_grad(&w.sample_weights);
        worst = worst.max(logit_grad_err(&logits, &g, |l| {
            let p = cross_entropy_per_sample(l, &labels).unwrap();
            p.losses.iter().zip(&w.sample_weights).map(|(a, b)| a * b).sum()
        }));
    }
    worst
}

pub fn cvar(instances: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (logits, labels, _) = random_logits(&mut rng);
        let q = rng.random_range(0.05..1.0);
        let per = cross_entropy_per_sample(&logits, &labels).unwrap();
        let cv = cvar_dro(&per.losses, q).unwrap();
        let g = per.weighted_grad(&cv.sample_weights);
        worst = worst.max(logit_grad_err(&logits, &g, |l| {
            cvar_dro(&cross_entropy_per_sample(l, &labels).unwrap().losses, q).unwrap().loss
        }));
    }
    worst
}

struct NetCase {
    params: NetworkParams,
    x: Matrix,
    labels: Vec<usize>,
    queue: EmbeddingQueue,
    sim: PairSimilarity,
    lambda: f64,
    tau: f64,
}

impl NetCase {
    fn random<R: Rng>(rng: &mut R, seed: u64) -> Self {
        let input = rng.random_range(2..6);
        let depth = rng.random_range(1..3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(8..13)).collect();
        let classes = rng.random_range(2..4);
        let embed = rng.random_range(2..5);
        let params = NetworkParams::init(input, &hidden, classes, embed, seed).unwrap();
        let n = rng.random_range(2..6);
        let x = Matrix::from_vec(n, input, gaussian_vec(rng, n * input)).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let fill = rng.random_range(4..12);
        let rows: Vec<Vec<f64>> = (0..fill).map(|_| unit_vec(rng, embed)).collect();
        let qlabels: Vec<usize> = (0..fill).map(|_| rng.random_range(0..classes)).collect();
        let mut queue = EmbeddingQueue::new(16, embed).unwrap();
        queue
            .enqueue(&EmbeddingBatch::from_labels(Matrix::from_rows(&rows).unwrap(), qlabels).unwrap())
            .unwrap();
        let sim = match rng.random_range(0..3) {
            0 => PairSimilarity::Cosine,
            1 => PairSimilarity::Spec(SimilaritySpec::from_alpha(rng.random_range(0.0..0.45)).unwrap()),
            _ => PairSimilarity::FixedMargin(rng.random_range(0.05..0.5)),
        };
        Self {
            params,
            x,
            labels,
            queue,
            sim,
            lambda: rng.random_range(0.1..2.0),
            tau: rng.random_range(0.2..2.0),
        }
    }

    /// Total loss with the logit and embedding gradients.
    fn loss(&self, params: &NetworkParams) -> Option<(f64, Matrix, Matrix)> {
        let t = forward(params, &self.x).ok()?;
        let (ce, g_logits) = cross_entropy(&t.logits, &self.labels).ok()?;
        let batch = EmbeddingBatch::from_labels(t.embedding.clone(), self.labels.clone()).ok()?;
        let sc = supcon_batch_loss(&batch, &self.queue, &self.sim, self.tau).ok()?;
        let mut g_emb = sc.grad;
        g_emb.scale(self.lambda);
        Some((ce + self.lambda * sc.loss, g_logits, g_emb))
    }
}

/// CE plus queue contrastive loss through every parameter of random
/// networks. Instances whose stencil straddles a ReLU kink are redrawn;
/// returns the worst error and how many were redrawn.
pub fn full_network(instances: usize, seed: u64) -> (f64, usize) {
    let mut rng = rng(seed);
    let mut worst_all: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    let mut net_seed = 0;
    while checked < instances {
        net_seed += 1;
        let case = NetCase::random(&mut rng, net_seed);
        let Some((_, gl, ge)) = case.loss(&case.params) else {
            continue;
        };
        let trace = forward(&case.params, &case.x).unwrap();
        // projector outputs near zero make the normalization ill-conditioned
        if trace.projection().iter_rows().any(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-2) {
            continue;
        }
        let grads = backward(&case.params, &trace, Some(&gl), Some(&ge)).unwrap();
        let analytic: Vec<f64> = grads.tensors().into_iter().flatten().copied().collect();

        let mut p = case.params.clone();
        let mut worst: f64 = 0.0;
        let mut kinked = false;
        let mut k = 0;
        for t in 0..p.tensors().len() {
            for i in 0..p.tensors()[t].len() {
                let old = p.tensors()[t][i];
                let mut at = |d: f64| {
                    p.tensors_mut()[t][i] = old + d;
                    case.loss(&p).unwrap().0
                };
                let mut stencil = |h: f64| (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
                let num = stencil(H);
                // a ReLU switching inside the stencil shows up as step-size dependence
                if rel_err(num, stencil(H / 4.0)) > 1e-6 {
                    kinked = true;
                }
                p.tensors_mut()[t][i] = old;
                worst = worst.max(rel_err(analytic[k], num));
                k += 1;
            }
        }
        if kinked {
            skipped += 1;
            continue;
        }
        worst_all = worst_all.max(worst);
        checked += 1;
    }
    (worst_all, skipped)
}
