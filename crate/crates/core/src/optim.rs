//! Adam with global-norm gradient clipping and an optional cosine decay.

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub clip_norm: f64,
    /// Learning rate at the last step relative to `lr`, reached by cosine
    /// decay. 1 keeps the rate constant.
    pub final_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            clip_norm: 1.0,
            final_lr_ratio: 1.0,
        }
    }
}

pub struct Adam {
    inner: AdamW,
    vars: Vec<Var>,
    clip_norm: f64,
    lr: f64,
    final_lr_ratio: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: &OptimConfig) -> Result<Self> {
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", cfg.lr)));
        }
        if !(cfg.final_lr_ratio > 0.0 && cfg.final_lr_ratio <= 1.0) {
            return Err(Error::Config(format!("final_lr_ratio {} must be in (0, 1]", cfg.final_lr_ratio)));
        }
        let params = ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        Ok(Self {
            inner: AdamW::new(vars.clone(), params)?,
            vars,
            clip_norm: cfg.clip_norm,
            lr: cfg.lr,
            final_lr_ratio: cfg.final_lr_ratio,
        })
    }

    /// Set the rate for `step` of a `total`-step run.
    pub fn schedule(&mut self, step: usize, total: usize) {
        let progress = if total > 1 { step as f64 / (total - 1) as f64 } else { 0.0 };
        let r = self.final_lr_ratio;
        let factor = r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
        self.inner.set_learning_rate(self.lr * factor);
    }

    pub fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }

    /// Backpropagate `loss`, clip, update. Returns the pre-clip gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let mut sq = 0f64;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::invalid("non-finite gradient norm"));
        }
        if self.clip_norm > 0.0 && norm > self.clip_norm {
            let scale = self.clip_norm / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), g.affine(scale, 0.0)?);
                }
            }
        }
        self.inner.step(&grads)?;
        Ok(norm)
    }
}
