//! Adam with L2 weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Fixed,
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "must be >= 0"));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            LrSchedule::Fixed => self.lr,
            LrSchedule::Cosine => cosine_lr(step, total_steps, self.lr),
        }
    }
}

/// `lr0 (1 + cos(pi t / T)) / 2`, held at `0` past `T`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    if step >= total {
        return 0.0;
    }
    lr0 * (1.0 + (PI * step as f64 / total as f64).cos()) / 2.0
}

/// Moment buffers of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: OptimConfig, shapes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        })
    }

    pub fn for_tensors(config: OptimConfig, tensors: &[&[f64]]) -> Result<Self> {
        let shapes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
        Self::new(config, &shapes)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    /// One bias-corrected Adam update at learning rate `lr`. Weight decay is
    /// added to the gradient before the moments.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != self.m[k].len() {
                return Err(Error::Shape(format!("tensor {k} changed size")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "non-finite gradient in tensor {k} at step {}",
                    self.t + 1
                )));
            }
        }
        if !(lr >= 0.0) {
            return Err(Error::Domain(format!("learning rate must be >= 0, got {lr}")));
        }
        self.t += 1;
        let OptimConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i] + weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
