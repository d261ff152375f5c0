//! Training loop: balanced resampling, classification plus contrastive
//! objective, momentum queue upkeep and per-epoch evaluation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{accuracies_expecting, argmax_rows, MetricReport};
use crate::losses::{
    cross_entropy_per_sample, cvar_dro, robust_dro_step, supcon_batch_loss, DroConfig, DroState,
    EmbeddingBatch, LossConfig,
};
use crate::matrix::Matrix;
use crate::moco::{MomentumQueueState, QueueConfig};
use crate::net::{backward, forward, NetworkConfig, NetworkParams};
use crate::optim::{AdamState, OptimConfig};
use crate::shiftgen::{DatasetConfig, DomainConfig, GroupedDataset, Split, SubpopConfig};
use crate::simcore::{AlphaMapping, SimilarityKind, SimilaritySpec};

/// Similarity section of a run config. Either `alpha` or explicit kappas.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub kind: SimilarityKind,
    pub kappa_p: Option<f64>,
    pub kappa_n: Option<f64>,
    pub alpha: Option<f64>,
    pub alpha_mapping: AlphaMapping,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            kind: SimilarityKind::Cosine,
            kappa_p: None,
            kappa_n: None,
            alpha: None,
            alpha_mapping: AlphaMapping::Symmetric,
        }
    }
}

impl SimilarityConfig {
    pub fn cosine() -> Self {
        Self::default()
    }

    pub fn alpha(alpha: f64) -> Self {
        Self {
            kind: SimilarityKind::Tvmf,
            alpha: Some(alpha),
            ..Self::default()
        }
    }

    pub fn kappas(kappa_p: f64, kappa_n: f64) -> Self {
        Self {
            kind: SimilarityKind::Tvmf,
            kappa_p: Some(kappa_p),
            kappa_n: Some(kappa_n),
            ..Self::default()
        }
    }

    pub fn to_spec(&self) -> Result<SimilaritySpec> {
        let bad = |key: &str, e: Error| Error::config(format!("similarity.{key}"), e.to_string());
        match self.kind {
            SimilarityKind::Cosine => {
                if self.alpha.is_some() || self.kappa_p.is_some() || self.kappa_n.is_some() {
                    return Err(Error::config(
                        "similarity.kind",
                        "cosine takes no alpha or kappa; use kind = \"tvmf\"",
                    ));
                }
                Ok(SimilaritySpec::cosine())
            }
            SimilarityKind::Tvmf => match self.alpha {
                Some(a) => {
                    if self.kappa_p.is_some() || self.kappa_n.is_some() {
                        return Err(Error::config("similarity.alpha", "give alpha or kappas, not both"));
                    }
                    SimilaritySpec::from_alpha_with(a, self.alpha_mapping).map_err(|e| bad("alpha", e))
                }
                None => {
                    let kp = self.kappa_p.unwrap_or(0.0);
                    let kn = self.kappa_n.unwrap_or(kp);
                    SimilaritySpec::tvmf(kp, kn).map_err(|e| bad("kappa_p", e))
                }
            },
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub similarity: SimilarityConfig,
    #[serde(default)]
    pub queue: QueueConfig,
    #[serde(default)]
    pub optimizer: OptimConfig,
    /// Defaults to 50 for subpopulation data and 25 otherwise.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_batch() -> usize {
    128
}

fn default_one() -> usize {
    1
}

fn default_repeats() -> usize {
    5
}

impl TrainConfig {
    pub fn new(name: impl Into<String>, dataset: DatasetConfig) -> Self {
        Self {
            name: name.into(),
            dataset,
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            similarity: SimilarityConfig::default(),
            queue: QueueConfig::default(),
            optimizer: OptimConfig::default(),
            epochs: None,
            batch_size: default_batch(),
            eval_every: 1,
            seed: 0,
            repeats: default_repeats(),
        }
    }

    /// Subpopulation benchmark with the generator defaults.
    pub fn subpop(name: impl Into<String>) -> Self {
        Self::new(name, DatasetConfig::Subpop(SubpopConfig::default()))
    }

    /// Multi-domain benchmark with the generator defaults.
    pub fn domain(name: impl Into<String>) -> Self {
        Self::new(name, DatasetConfig::Domain(DomainConfig::default()))
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.dataset {
            DatasetConfig::Subpop(_) => 50,
            _ => 25,
        })
    }

    pub fn similarity_spec(&self) -> Result<SimilaritySpec> {
        self.similarity.to_spec()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        self.dataset.validate()?;
        let spec = self.similarity_spec()?;
        self.loss.validate(&spec)?;
        self.queue.validate()?;
        self.optimizer.validate()?;
        if self.network.embed_dim == 0 || self.network.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::config("network", "all widths must be >= 1"));
        }
        if self.epochs() == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        if self.repeats == 0 {
            return Err(Error::config("repeats", "must be >= 1"));
        }
        if self.loss.supcon_weight > 0.0 && self.batch_size > self.queue.capacity {
            return Err(Error::config("queue.capacity", "must hold at least one batch"));
        }
        Ok(())
    }
}

/// Group-balanced sampler: a uniform group, then a uniform member of it.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    members: Vec<Vec<usize>>,
}

impl BalancedSampler {
    /// Groups are `0..num_groups`; each must have a member.
    pub fn new(groups: &[usize], num_groups: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); num_groups];
        for (i, &g) in groups.iter().enumerate() {
            if g >= num_groups {
                return Err(Error::Contract(format!("group id {g} outside [0, {num_groups})")));
            }
            members[g].push(i);
        }
        if let Some(g) = members.iter().position(|m| m.is_empty()) {
            return Err(Error::config("dataset", format!("group {g} has no training samples")));
        }
        Ok(Self { members })
    }

    pub fn num_groups(&self) -> usize {
        self.members.len()
    }

    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if batch_size < self.members.len() {
            return Err(Error::config(
                "batch_size",
                format!("must be >= the number of groups ({})", self.members.len()),
            ));
        }
        Ok((0..batch_size)
            .map(|_| {
                let m = &self.members[rng.random_range(0..self.members.len())];
                m[rng.random_range(0..m.len())]
            })
            .collect())
    }
}

/// Draws `batch_size` indices, balanced over the distinct ids in `groups`.
pub fn resample_balanced<R: Rng>(groups: &[usize], batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut ids: Vec<usize> = groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::Contract("no samples to resample".into()));
    }
    let dense: Vec<usize> = groups
        .iter()
        .map(|g| ids.binary_search(g).expect("present"))
        .collect();
    BalancedSampler::new(&dense, ids.len())?.sample(batch_size, rng)
}

/// Losses of one optimizer step. `total == cls + weight * supcon` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    pub supcon: f64,
    pub supcon_weight: f64,
    pub total: f64,
    /// The contrastive term was not computed (weight 0 or empty queue).
    pub supcon_skipped: bool,
}

/// Metrics logged after an evaluated epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub cls_loss: f64,
    pub supcon_loss: f64,
    pub total_loss: f64,
    /// Steps whose contrastive term was skipped.
    pub supcon_skipped_steps: usize,
    /// Anchors with no same-label queue entry.
    pub anchors_without_positives: usize,
    pub dro_weights: Vec<f64>,
    pub reports: Vec<MetricReport>,
}

impl EpochRecord {
    pub fn report(&self, split: Split) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.split == split.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub name: String,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    pub steps: Vec<StepLog>,
}

/// Final and best value of every metric, per split.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    #[serde(rename = "final")]
    pub last: BTreeMap<String, BTreeMap<String, f64>>,
    pub best: BTreeMap<String, BTreeMap<String, f64>>,
}

fn split_metrics(r: &MetricReport) -> Vec<(String, f64)> {
    let mut out = vec![
        ("overall".to_string(), r.overall),
        ("worst_group".to_string(), r.worst_group),
    ];
    out.extend(r.per_group.iter().map(|(g, v)| (format!("group_{g}"), *v)));
    out.extend(r.per_domain.iter().map(|(d, v)| (format!("domain_{d}"), *v)));
    out
}

impl RunHistory {
    /// Per-epoch series of `metric` on `split`.
    pub fn series(&self, split: Split, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|rec| {
                let r = rec.report(split)?;
                split_metrics(r).into_iter().find(|(k, _)| k == metric).map(|(_, v)| v)
            })
            .collect()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// Rows `epoch,split,metric,value`. Training quantities use split `train`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,split,metric,value")?;
        for rec in &self.records {
            let e = rec.epoch;
            writeln!(out, "{e},train,lr,{}", rec.lr)?;
            writeln!(out, "{e},train,loss_cls,{}", rec.cls_loss)?;
            writeln!(out, "{e},train,loss_supcon,{}", rec.supcon_loss)?;
            writeln!(out, "{e},train,loss_total,{}", rec.total_loss)?;
            writeln!(out, "{e},train,supcon_skipped_steps,{}", rec.supcon_skipped_steps)?;
            writeln!(out, "{e},train,anchors_without_positives,{}", rec.anchors_without_positives)?;
            for (g, w) in rec.dro_weights.iter().enumerate() {
                writeln!(out, "{e},train,dro_weight_{g},{w}")?;
            }
            for r in &rec.reports {
                for (k, v) in split_metrics(r) {
                    writeln!(out, "{e},{},{k},{v}", r.split)?;
                }
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> RunSummary {
        let mut last = BTreeMap::new();
        let mut best: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for rec in &self.records {
            for r in &rec.reports {
                let b = best.entry(r.split.clone()).or_default();
                for (k, v) in split_metrics(r) {
                    let slot = b.entry(k).or_insert(v);
                    if v > *slot {
                        *slot = v;
                    }
                }
            }
        }
        if let Some(rec) = self.records.last() {
            for r in &rec.reports {
                last.insert(r.split.clone(), split_metrics(r).into_iter().collect());
            }
        }
        RunSummary {
            name: self.name.clone(),
            seed: self.seed,
            epochs: self.records.last().map_or(0, |r| r.epoch),
            last,
            best,
        }
    }
}

/// Trained online network together with its history and data.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub history: RunHistory,
    pub params: NetworkParams,
    pub dataset: GroupedDataset,
}

/// Accuracy report of `params` on one split.
pub fn evaluate_split(params: &NetworkParams, data: &GroupedDataset, split: Split) -> Result<MetricReport> {
    let view = data.view(split);
    let trace = forward(params, &view.x)?;
    let preds = argmax_rows(&trace.logits);
    let mut r = accuracies_expecting(&preds, &view.y, &view.group, &view.domain, data.num_groups)?;
    r.split = split.name().to_string();
    Ok(r)
}

pub fn train(cfg: &TrainConfig) -> Result<RunHistory> {
    Ok(train_with(cfg, |_, _, _| Ok(()))?.history)
}

/// Runs training, calling `on_epoch(epoch, online, data)` after every
/// evaluated epoch.
pub fn train_with<F>(cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainedRun>
where
    F: FnMut(usize, &NetworkParams, &GroupedDataset) -> Result<()>,
{
    cfg.validate()?;
    let data = cfg.dataset.generate()?;
    data.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::config("dataset", "train split is empty"));
    }
    let train = data.view(Split::Train);
    let eval_splits: Vec<Split> = data
        .present_splits()
        .into_iter()
        .filter(|&s| s != Split::Train)
        .collect();

    let spec = cfg.similarity_spec()?;
    let pair = cfg.loss.pair_similarity(&spec);
    let lambda = cfg.loss.supcon_weight;
    let tau = cfg.loss.temperature;
    let use_supcon = lambda > 0.0;

    let mut online = NetworkParams::init(
        data.dim(),
        &cfg.network.hidden_dims,
        data.num_classes,
        cfg.network.embed_dim,
        cfg.seed,
    )?;
    let mut mq = if use_supcon {
        Some(MomentumQueueState::new(&online, &cfg.queue)?)
    } else {
        None
    };
    let mut adam = AdamState::for_tensors(cfg.optimizer, &online.tensors())?;
    let mut dro = match cfg.loss.dro {
        DroConfig::Robust { step_size } => Some(DroState::uniform(data.num_groups, step_size)?),
        _ => None,
    };
    let sampler = if cfg.loss.dro.is_active() {
        let s = BalancedSampler::new(&train.group, data.num_groups)?;
        if cfg.batch_size < s.num_groups() {
            return Err(Error::config("batch_size", "must be >= the number of groups"));
        }
        Some(s)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let epochs = cfg.epochs();
    let total_steps = epochs * steps_per_epoch;

    let mut history = RunHistory {
        name: cfg.name.clone(),
        seed: cfg.seed,
        records: Vec::new(),
        steps: Vec::with_capacity(total_steps),
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut global = 0usize;

    for epoch in 1..=epochs {
        if sampler.is_none() {
            order.shuffle(&mut rng);
        }
        let (mut sum_cls, mut sum_sup, mut sum_total) = (0.0, 0.0, 0.0);
        let (mut skipped_steps, mut no_pos) = (0usize, 0usize);
        let mut lr = 0.0;
        for step in 0..steps_per_epoch {
            let idx = match &sampler {
                Some(s) => s.sample(cfg.batch_size, &mut rng)?,
                None => {
                    let lo = step * cfg.batch_size;
                    order[lo..(lo + cfg.batch_size).min(n)].to_vec()
                }
            };
            let x = train.x.select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
            let groups: Vec<usize> = idx.iter().map(|&i| train.group[i]).collect();
            let fault = |reason: String| Error::TrainingFault {
                epoch,
                step,
                reason,
            };

            let trace = forward(&online, &x)?;
            let ce = cross_entropy_per_sample(&trace.logits, &labels)?;
            if let Some(i) = ce.losses.iter().position(|l| !l.is_finite()) {
                return Err(fault(format!("non-finite cross entropy at batch row {i}")));
            }
            let (cls, weights) = match cfg.loss.dro {
                DroConfig::None => {
                    let w = 1.0 / labels.len() as f64;
                    (ce.losses.iter().sum::<f64>() * w, vec![w; labels.len()])
                }
                DroConfig::Robust { .. } => {
                    let st = dro.as_mut().expect("robust state");
                    let r = robust_dro_step(&ce.losses, &groups, st)?;
                    (r.loss, r.sample_weights)
                }
                DroConfig::Cvar { fraction } => {
                    let r = cvar_dro(&ce.losses, fraction)?;
                    (r.loss, r.sample_weights)
                }
            };
            let grad_logits = ce.weighted_grad(&weights);

            let mut sup = 0.0;
            let mut grad_emb = None;
            let mut skipped = true;
            if let Some(state) = mq.as_ref() {
                if !state.queue.is_empty() {
                    let batch = EmbeddingBatch::from_labels(trace.embedding.clone(), labels.clone())
                        .map_err(|e| fault(e.to_string()))?;
                    let out = supcon_batch_loss(&batch, &state.queue, &pair, tau)?;
                    no_pos += out.skipped;
                    sup = out.loss;
                    let mut g = out.grad;
                    g.scale(lambda);
                    grad_emb = Some(g);
                    skipped = false;
                }
            }
            if skipped {
                skipped_steps += 1;
            }
            let total = cls + lambda * sup;
            if !total.is_finite() {
                return Err(fault(format!("non-finite loss (cls {cls}, supcon {sup})")));
            }

            let grads = backward(&online, &trace, Some(&grad_logits), grad_emb.as_ref())?;
            lr = cfg.optimizer.lr_at(global, total_steps);
            {
                let g = grads.tensors();
                let mut p = online.tensors_mut();
                adam.step(&mut p, &g, lr).map_err(|e| fault(e.to_string()))?;
            }
            if let Some(state) = mq.as_mut() {
                state.update_target(&online)?;
                // a degenerate target embedding is a numerical fault of this run
                state.encode_and_enqueue(&x, &labels).map_err(|e| fault(e.to_string()))?;
            }

            history.steps.push(StepLog {
                epoch,
                step,
                lr,
                cls,
                supcon: sup,
                supcon_weight: lambda,
                total,
                supcon_skipped: skipped,
            });
            sum_cls += cls;
            sum_sup += sup;
            sum_total += total;
            global += 1;
        }

        if epoch % cfg.eval_every == 0 || epoch == epochs {
            let reports = eval_splits
                .iter()
                .map(|&s| evaluate_split(&online, &data, s))
                .collect::<Result<Vec<_>>>()?;
            let k = steps_per_epoch as f64;
            history.records.push(EpochRecord {
                epoch,
                lr,
                cls_loss: sum_cls / k,
                supcon_loss: sum_sup / k,
                total_loss: sum_total / k,
                supcon_skipped_steps: skipped_steps,
                anchors_without_positives: no_pos,
                dro_weights: dro.as_ref().map(|d| d.weights().to_vec()).unwrap_or_default(),
                reports,
            });
            on_epoch(epoch, &online, &data)?;
        }
    }
    Ok(TrainedRun {
        history,
        params: online,
        dataset: data,
    })
}

/// Backbone features or projector embeddings of a split, for PCA export.
pub fn split_representations(
    params: &NetworkParams,
    data: &GroupedDataset,
    split: Split,
    projector: bool,
) -> Result<Matrix> {
    let trace = forward(params, &data.view(split).x)?;
    Ok(if projector { trace.embedding } else { trace.features })
}
