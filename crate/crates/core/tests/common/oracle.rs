//! Oracle checks shared by the tests and the acceptance run. Each panics
//! on a mismatch.

use std::collections::{BTreeMap, VecDeque};

use super::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tvmf_lab::eval::accuracies;
use tvmf_lab::losses::{cvar_dro, robust_dro_step, supcon_batch_loss, DroState, EmbeddingBatch, PairSimilarity};
use tvmf_lab::moco::{EmbeddingQueue, MomentumQueueState, QueueConfig};
use tvmf_lab::net::{forward, NetworkParams};
use tvmf_lab::simcore::SimilaritySpec;
use tvmf_lab::trainer::resample_balanced;
use tvmf_lab::Matrix;

fn subset_max_mean(losses: &[f64], k: usize) -> f64 {
    let n = losses.len();
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let s: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| losses[i]).sum();
        best = best.max(s / k as f64);
    }
    best
}

pub fn cvar_matches_exhaustive_subsets() {
    let mut rng = rng(10);
    for n in 1..=12usize {
        for trial in 0..6 {
            // integer losses on some trials force ties at the cutoff
            let losses: Vec<f64> = (0..n)
                .map(|_| {
                    if trial % 2 == 0 {
                        rng.random_range(0.0..5.0)
                    } else {
                        rng.random_range(0..4) as f64
                    }
                })
                .collect();
            for k in 1..=n {
                let q = k as f64 / n as f64;
                let cv = cvar_dro(&losses, q).unwrap();
                assert_eq!(cv.mask.iter().filter(|&&m| m).count(), k, "n {n} q {q}");
                let oracle = subset_max_mean(&losses, k);
                assert!((cv.loss - oracle).abs() < 1e-12, "n {n} k {k}: {} vs {oracle}", cv.loss);
                let masked: f64 = losses.iter().zip(&cv.mask).filter(|(_, &m)| m).map(|(l, _)| l).sum();
                assert!((masked / k as f64 - cv.loss).abs() < 1e-12);
            }
        }
    }
}

pub fn robust_dro_one_step_closed_form() {
    // two groups with means 1 and 3 from uniform weights:
    // w1 = e^{3 eta} / (e^{eta} + e^{3 eta}) = 1 / (1 + e^{-2 eta})
    let eta = 0.5;
    let mut state = DroState::uniform(2, eta).unwrap();
    let out = robust_dro_step(&[1.0, 1.0, 3.0], &[0, 0, 1], &mut state).unwrap();
    let w1 = 1.0 / (1.0 + (-2.0 * eta).exp());
    let w0 = 1.0 - w1;
    assert!((state.weights()[0] - w0).abs() < 1e-15);
    assert!((state.weights()[1] - w1).abs() < 1e-15);
    assert!((out.loss - (w0 + 3.0 * w1)).abs() < 1e-15);
    assert!((out.sample_weights[0] - w0 / 2.0).abs() < 1e-15);
    assert!((out.sample_weights[2] - w1).abs() < 1e-15);

    let mut rng = rng(11);
    for _ in 0..500 {
        let g = rng.random_range(1..5);
        let n = rng.random_range(1..20);
        let eta = rng.random_range(0.001..2.0);
        let mut w: Vec<f64> = (0..g).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let sum_w: f64 = w.iter().sum();
        w[0] += 1.0 - sum_w;
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..g)).collect();
        let mut state = DroState::with_weights(w.clone(), eta).unwrap();
        let out = robust_dro_step(&losses, &groups, &mut state).unwrap();

        let mut means = vec![0.0; g];
        let mut counts = vec![0.0; g];
        for (&l, &gi) in losses.iter().zip(&groups) {
            means[gi] += l;
            counts[gi] += 1.0;
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            if *c > 0.0 {
                *m /= c;
            }
        }
        let un: Vec<f64> = w.iter().zip(&means).map(|(w, m)| w * (eta * m).exp()).collect();
        let z: f64 = un.iter().sum();
        let expected: Vec<f64> = un.iter().map(|u| u / z).collect();
        for (a, b) in state.weights().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let loss: f64 = expected.iter().zip(&means).map(|(w, m)| w * m).sum();
        assert!((out.loss - loss).abs() < 1e-12);
    }
}

pub fn queue_matches_list_model() {
    let mut rng = rng(12);
    let mut ops = 0;
    while ops < 10_000 {
        let cap = rng.random_range(1..20);
        let dim = rng.random_range(1..4);
        let mut q = EmbeddingQueue::new(cap, dim).unwrap();
        let mut model: VecDeque<(Vec<f64>, usize)> = VecDeque::new();
        for _ in 0..200 {
            ops += 1;
            let n = rng.random_range(1..cap + 3);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| unit_vec(&mut rng, dim)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let batch = EmbeddingBatch::from_labels(Matrix::from_rows(&rows).unwrap(), labels.clone()).unwrap();
            let res = q.enqueue(&batch);
            if n > cap {
                assert!(res.is_err());
                continue;
            }
            res.unwrap();
            for (r, l) in rows.into_iter().zip(labels) {
                model.push_back((r, l));
                if model.len() > cap {
                    model.pop_front();
                }
            }
            assert_eq!(q.len(), model.len());
            let got = q.ordered();
            assert_eq!(got.len(), model.len());
            for (a, b) in got.iter().zip(&model) {
                assert_eq!(a, b);
            }
            let anchor = rng.random_range(0..3);
            let (pos, neg) = q.split_pos_neg(anchor);
            assert_eq!(pos.len(), model.iter().filter(|e| e.1 == anchor).count());
            assert_eq!(pos.len() + neg.len(), model.len());
        }
    }
}

pub fn enqueued_entries_carry_target_version() {
    let online = NetworkParams::init(3, &[16], 2, 4, 5).unwrap();
    let cfg = QueueConfig {
        capacity: 8,
        momentum: 0.9,
    };
    let mut state = MomentumQueueState::new(&online, &cfg).unwrap();
    let mut moved = NetworkParams::init(3, &[16], 2, 4, 6).unwrap();
    let mut rng = rng(13);
    for step in 0..5u64 {
        state.update_target(&moved).unwrap();
        let x = Matrix::from_vec(2, 3, gaussian_vec(&mut rng, 6)).unwrap();
        state.encode_and_enqueue(&x, &[0, 1]).unwrap();
        assert_eq!(state.version(), step + 1);
        let expect = forward(state.target(), &x).unwrap().embedding;
        let cur = state.queue.cursor();
        for k in 0..2 {
            let slot = (cur + 8 - 2 + k) % 8;
            assert_eq!(state.queue.entry_version(slot), step + 1);
            assert_eq!(state.queue.entry(slot).0, expect.row(k));
        }
        moved.tensors_mut()[0][0] += 0.1;
    }
}

/// Direct per-pair form: mean over positives of log(1 + sum_n exp((s_n - s_p) / tau)).
fn naive_anchor_loss(anchor: &[f64], pos: &[&[f64]], neg: &[&[f64]], spec: &SimilaritySpec, tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0);
    let phi = |c: f64, k: f64| (1.0 + c) / (1.0 + k * (1.0 - c)) - 1.0;
    let mut total = 0.0;
    for p in pos {
        let sp = phi(dot(anchor, p), spec.kappa_p());
        let inner: f64 = neg.iter().map(|n| ((phi(dot(anchor, n), spec.kappa_n()) - sp) / tau).exp()).sum();
        total += (1.0 + inner).ln();
    }
    total / pos.len() as f64
}

pub fn batch_loss_matches_naive_reference() {
    let mut rng = rng(14);
    for _ in 0..200 {
        let dim = rng.random_range(2..8);
        let classes = rng.random_range(2..4);
        let cap = rng.random_range(4..40);
        let mut queue = EmbeddingQueue::new(cap, dim).unwrap();
        let fill = rng.random_range(1..=cap);
        let rows: Vec<Vec<f64>> = (0..fill).map(|_| unit_vec(&mut rng, dim)).collect();
        let qlabels: Vec<usize> = (0..fill).map(|_| rng.random_range(0..classes)).collect();
        queue
            .enqueue(&EmbeddingBatch::from_labels(Matrix::from_rows(&rows).unwrap(), qlabels.clone()).unwrap())
            .unwrap();
        let n = rng.random_range(1..8);
        let brows: Vec<Vec<f64>> = (0..n).map(|_| unit_vec(&mut rng, dim)).collect();
        let blabels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let batch = EmbeddingBatch::from_labels(Matrix::from_rows(&brows).unwrap(), blabels.clone()).unwrap();
        let spec = if rng.random_bool(0.3) {
            SimilaritySpec::cosine()
        } else {
            SimilaritySpec::tvmf(rng.random_range(-0.4..3.0), rng.random_range(-0.4..3.0)).unwrap()
        };
        let tau = rng.random_range(0.2..2.0);
        let out = supcon_batch_loss(&batch, &queue, &PairSimilarity::Spec(spec), tau).unwrap();

        let mut sum = 0.0;
        let mut used = 0;
        for (a, &l) in brows.iter().zip(&blabels) {
            let pos: Vec<&[f64]> = rows.iter().zip(&qlabels).filter(|(_, &q)| q == l).map(|(r, _)| r.as_slice()).collect();
            let neg: Vec<&[f64]> = rows.iter().zip(&qlabels).filter(|(_, &q)| q != l).map(|(r, _)| r.as_slice()).collect();
            if pos.is_empty() {
                continue;
            }
            sum += naive_anchor_loss(a, &pos, &neg, &spec, tau);
            used += 1;
        }
        assert_eq!(out.contributing, used);
        assert_eq!(out.skipped, n - used);
        let expect = if used > 0 { sum / used as f64 } else { 0.0 };
        assert!((out.loss - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{} vs {expect}", out.loss);
    }
}

pub fn balanced_resampling_share() {
    let mut groups = vec![0usize; 9900];
    groups.extend(std::iter::repeat(1).take(100));
    let mut rng = rng(15);
    let mut zero = 0usize;
    let mut total = 0usize;
    for _ in 0..10_000 {
        let idx = resample_balanced(&groups, 512, &mut rng).unwrap();
        zero += idx.iter().filter(|&&i| groups[i] == 0).count();
        total += idx.len();
    }
    let share = zero as f64 / total as f64;
    assert!((share - 0.5).abs() <= 0.005, "group 0 share {share}");
}

pub fn resampling_is_seeded() {
    let groups: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let a = resample_balanced(&groups, 64, &mut rng(16)).unwrap();
    let b = resample_balanced(&groups, 64, &mut rng(16)).unwrap();
    assert_eq!(a, b);
    let single = resample_balanced(&[7; 50], 32, &mut rng(16)).unwrap();
    assert!(single.iter().all(|&i| i < 50));
}

pub fn worst_group_matches_brute_force() {
    let mut rng = rng(17);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let g = rng.random_range(1..6);
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let groups: Vec<usize> = (0..n).map(|_| rng.random_range(0..g)).collect();
        let domains: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let r = accuracies(&preds, &labels, &groups, &domains).unwrap();

        let mut per: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for i in 0..n {
            let e = per.entry(groups[i]).or_default();
            e.1 += 1.0;
            if preds[i] == labels[i] {
                e.0 += 1.0;
            }
        }
        let worst = per.values().map(|(c, t)| c / t).fold(f64::INFINITY, f64::min);
        assert_eq!(r.worst_group, worst);
        assert!(r.per_group.values().all(|v| (0.0..=1.0).contains(v)));

        // permuting samples changes nothing
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let pick = |v: &[usize]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let p = accuracies(&pick(&preds), &pick(&labels), &pick(&groups), &pick(&domains)).unwrap();
        assert_eq!(p, r);
    }
}
