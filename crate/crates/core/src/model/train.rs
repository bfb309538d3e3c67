//! AdamW training with warmup, cosine decay and global gradient clipping.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::train_windows;
use crate::error::{MasaError, Result};
use crate::linalg::Matrix;
use crate::model::config::ToyConfig;
use crate::model::forward::loss_and_gradients;
use crate::model::params::{decays, ModelParams};
use crate::model::tape::Gradients;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub final_lr_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            seq_len: 128,
            lr: 3e-3,
            warmup_frac: 0.1,
            final_lr_frac: 0.1,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(MasaError::invalid("batch size and sequence length must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(MasaError::invalid("lr must be positive, warmup and final fractions in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.weight_decay < 0.0 {
            return Err(MasaError::invalid("betas must lie in [0, 1) and decay be nonnegative"));
        }
        if !(self.grad_clip > 0.0) || !(self.eps > 0.0) {
            return Err(MasaError::invalid("grad clip and eps must be positive"));
        }
        Ok(())
    }

    /// Learning rate used for the update at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_frac * self.steps as f64).round() as usize;
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = self.steps.saturating_sub(warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        let floor = self.final_lr_frac * self.lr;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricRow>,
}

/// AdamW state keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    moments: BTreeMap<String, (Matrix, Matrix)>,
    t: i32,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One decoupled-decay update; `grads` must already be clipped.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64, s: &TrainSettings) {
        self.t += 1;
        let bc1 = 1.0 - s.beta1.powi(self.t);
        let bc2 = 1.0 - s.beta2.powi(self.t);
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, p| {
            let Some(g) = grads.get(name) else {
                return;
            };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (Matrix::zeros(p.nrows(), p.ncols()), Matrix::zeros(p.nrows(), p.ncols())));
            let wd = if decays(name) { s.weight_decay } else { 0.0 };
            for i in 0..p.len() {
                let gi = g.as_slice()[i];
                let mi = &mut m.as_mut_slice()[i];
                *mi = s.beta1 * *mi + (1.0 - s.beta1) * gi;
                let vi = &mut v.as_mut_slice()[i];
                *vi = s.beta2 * *vi + (1.0 - s.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + s.eps);
                let pi = &mut p.as_mut_slice()[i];
                *pi -= lr * (update + wd * *pi);
            }
        });
    }
}

/// Trains a freshly initialized model on `corpus`.
///
/// Batches are drawn with replacement from the fixed windows using a
/// stream seeded from `config.seed`, so runs are reproducible bitwise.
pub fn train(config: &ToyConfig, corpus: &[u8], settings: &TrainSettings) -> Result<TrainOutcome> {
    let params = ModelParams::init(config)?;
    train_from(params, corpus, settings)
}

pub fn train_from(mut params: ModelParams, corpus: &[u8], settings: &TrainSettings) -> Result<TrainOutcome> {
    settings.validate()?;
    if settings.seq_len > params.config.context {
        return Err(MasaError::invalid(format!(
            "sequence length {} exceeds model context {}",
            settings.seq_len, params.config.context
        )));
    }
    let windows = train_windows(corpus, settings.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.config.seed ^ 0x5EED_DA7A);
    let mut opt = AdamW::new();
    let mut metrics = Vec::with_capacity(settings.steps);
    for step in 0..settings.steps {
        let batch: Vec<&[u8]> = (0..settings.batch_size)
            .map(|_| windows[rng.gen_range(0..windows.len())])
            .collect();
        let (loss, mut grads) = loss_and_gradients(&params, &batch)?;
        if !loss.is_finite() {
            return Err(MasaError::Diverged { step, loss });
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(MasaError::Diverged { step, loss: norm });
        }
        if norm > settings.grad_clip {
            grads.scale(settings.grad_clip / norm);
        }
        let lr = settings.lr_at(step);
        opt.step(&mut params, &grads, lr, settings);
        metrics.push(MetricRow { step, loss, lr });
        if step % 100 == 0 {
            log::debug!("step {step} loss {loss:.4} lr {lr:.2e}");
        }
    }
    Ok(TrainOutcome { params, metrics })
}
