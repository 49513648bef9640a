//! AdamW with decoupled weight decay and non-finite step skipping.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Consecutive skipped steps after which training aborts.
pub const MAX_CONSECUTIVE_SKIPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    /// Non-finite gradients; parameters untouched.
    Skipped,
}

/// Moment accumulators aligned with a store's entries.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    skipped: usize,
    consecutive_skips: usize,
}

pub fn global_norm(grads: &[Option<Tensor<f32>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<f32>) -> Result<Self> {
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) || cfg.weight_decay < 0.0 || !cfg.weight_decay.is_finite() {
            return Err(Error::Config(format!("invalid lr {} or weight decay {}", cfg.lr, cfg.weight_decay)));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) || cfg.eps <= 0.0 || cfg.grad_clip < 0.0 {
            return Err(Error::Config("invalid AdamW moments, eps or clip".into()));
        }
        let zeros = |_: &_| Vec::new();
        Ok(Self {
            cfg,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
            t: 0,
            skipped: 0,
            consecutive_skips: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    /// Updates every trainable entry. A trainable entry without a gradient
    /// is treated as having a zero gradient (it still decays).
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) -> Result<StepOutcome> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Config(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            self.skipped += 1;
            self.consecutive_skips += 1;
            if self.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(Error::Numeric(format!("{MAX_CONSECUTIVE_SKIPS} consecutive non-finite gradient steps")));
            }
            return Ok(StepOutcome::Skipped);
        }
        self.consecutive_skips = 0;
        let norm = global_norm(grads);
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip { self.cfg.grad_clip / norm } else { 1.0 };
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let n = e.tensor.numel();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.is_empty() {
                m.resize(n, 0.0);
                v.resize(n, 0.0);
            }
            let decay = if e.decays() { 1.0 - c.lr * c.weight_decay } else { 1.0 };
            let g = grads[i].as_ref().map(Tensor::data);
            for (j, p) in e.tensor.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j] as f64 * clip);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *p = ((*p as f64) * decay - c.lr * update) as f32;
            }
        }
        Ok(StepOutcome::Applied { grad_norm: norm })
    }
}
