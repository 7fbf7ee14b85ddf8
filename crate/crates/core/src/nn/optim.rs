//! AdamW with linear warmup, cosine decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm cap; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            warmup_steps: 100,
            total_steps: 2000,
            final_lr_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::InvalidArgument(
                "optimizer needs a positive learning rate and warmup <= steps".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate used for the update that completes step `step + 1`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.peak_lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

/// Optimizer state. Parameters and moments are rounded to `f32` after every
/// update, so a 32-bit checkpoint restores the exact training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.rows, p.value.cols))
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &mut Grads) -> Result<f64> {
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: "non-finite gradient".into(),
            });
        }
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / norm);
        }
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = &grads.tensors[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let p = store.value_mut(id);
            for i in 0..p.data.len() {
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * g.data[i];
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * g.data[i] * g.data[i];
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p.data[i]);
            }
            p.round_f32();
            m.round_f32();
            v.round_f32();
        }
        Ok(norm)
    }
}
