//! Momentum (target) encoder and the FIFO queue of its embeddings.

use crate::error::{Error, Result};
use crate::losses::{check_unit, EmbeddingBatch};
use crate::matrix::Matrix;
use crate::net::{forward, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueueConfig {
    pub capacity: usize,
    pub momentum: f64,
}

impl Default for QueueConfig {
    fn default() -> Self {
        Self {
            capacity: 4096,
            momentum: 0.999,
        }
    }
}

impl QueueConfig {
    /// Queue size used with full-scale image training.
    pub const FULL_CAPACITY: usize = 65536;

    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::config("queue.capacity", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("queue.momentum", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Ring buffer of unit embeddings with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    embeddings: Matrix,
    labels: Vec<usize>,
    versions: Vec<u64>,
    cursor: usize,
    fill: usize,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Domain("queue capacity and dimension must be >= 1".into()));
        }
        Ok(Self {
            embeddings: Matrix::zeros(capacity, dim),
            labels: vec![0; capacity],
            versions: vec![0; capacity],
            cursor: 0,
            fill: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Next slot to be written.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Embedding and label stored in a filled slot.
    #[inline]
    pub fn entry(&self, slot: usize) -> (&[f64], usize) {
        debug_assert!(slot < self.fill);
        (self.embeddings.row(slot), self.labels[slot])
    }

    /// Target-encoder version that produced the entry in `slot`.
    pub fn entry_version(&self, slot: usize) -> u64 {
        self.versions[slot]
    }

    /// Appends rows in order, overwriting the oldest entries once full.
    pub fn enqueue(&mut self, batch: &EmbeddingBatch) -> Result<()> {
        self.enqueue_versioned(&batch.embeddings, &batch.labels, 0)
    }

    pub(crate) fn enqueue_versioned(&mut self, rows: &Matrix, labels: &[usize], version: u64) -> Result<()> {
        let n = rows.rows();
        if n > self.capacity() {
            return Err(Error::Contract(format!(
                "batch of {n} exceeds queue capacity {}",
                self.capacity()
            )));
        }
        if rows.cols() != self.dim() || labels.len() != n {
            return Err(Error::Shape(format!(
                "enqueue of {n}x{} with {} labels into a {}-d queue",
                rows.cols(),
                labels.len(),
                self.dim()
            )));
        }
        for row in rows.iter_rows() {
            check_unit(row)?;
        }
        for (row, &label) in rows.iter_rows().zip(labels) {
            self.embeddings.row_mut(self.cursor).copy_from_slice(row);
            self.labels[self.cursor] = label;
            self.versions[self.cursor] = version;
            self.cursor = (self.cursor + 1) % self.capacity();
        }
        self.fill = (self.fill + n).min(self.capacity());
        Ok(())
    }

    /// Entries oldest first.
    pub fn ordered(&self) -> Vec<(Vec<f64>, usize)> {
        let start = if self.fill < self.capacity() { 0 } else { self.cursor };
        (0..self.fill)
            .map(|k| {
                let slot = (start + k) % self.capacity();
                (self.embeddings.row(slot).to_vec(), self.labels[slot])
            })
            .collect()
    }

    /// Slots with the anchor's label and slots with any other label.
    pub fn split_pos_neg(&self, anchor_label: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.fill).partition(|&s| self.labels[s] == anchor_label)
    }
}

/// `target <- mu * target + (1 - mu) * online`, elementwise.
pub fn ema_update(target: &mut NetworkParams, online: &NetworkParams, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Domain(format!("momentum must lie in [0, 1], got {momentum}")));
    }
    if !target.same_shape(online) {
        return Err(Error::Shape("target and online networks differ in shape".into()));
    }
    let src = online.tensors();
    for (t, s) in target.tensors_mut().into_iter().zip(src) {
        for (tv, &sv) in t.iter_mut().zip(s) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

/// Target network, its momentum, and the queue it feeds.
#[derive(Debug, Clone)]
pub struct MomentumQueueState {
    pub queue: EmbeddingQueue,
    target: NetworkParams,
    momentum: f64,
    version: u64,
}

impl MomentumQueueState {
    /// Starts the target as a copy of the online network.
    pub fn new(online: &NetworkParams, config: &QueueConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            queue: EmbeddingQueue::new(config.capacity, online.embed_dim())?,
            target: online.clone(),
            momentum: config.momentum,
            version: 0,
        })
    }

    pub fn target(&self) -> &NetworkParams {
        &self.target
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Number of EMA updates applied so far.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn update_target(&mut self, online: &NetworkParams) -> Result<()> {
        ema_update(&mut self.target, online, self.momentum)?;
        self.version += 1;
        Ok(())
    }

    /// Embeds `x` with the current target network and enqueues the result,
    /// tagging each entry with the target version.
    pub fn encode_and_enqueue(&mut self, x: &Matrix, labels: &[usize]) -> Result<()> {
        let trace = forward(&self.target, x)?;
        self.queue.enqueue_versioned(&trace.embedding, labels, self.version)
    }
}
