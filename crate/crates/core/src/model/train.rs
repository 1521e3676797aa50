//! Adam with linear warm-up then constant learning rate, and global-norm
//! gradient clipping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Example, Model, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFinite { step: u64, diagnostic: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 3e-4, warmup_steps: 20, clip_norm: 1.0, batch_size: 8, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl TrainConfig {
    /// Linear warm-up over `warmup_steps`, then constant.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Parameters, Adam moments, step count and the data-order RNG.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let n = model.params.len();
        TrainState { model, m: vec![0.0; n], v: vec![0.0; n], step: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Shuffled index batches for one epoch over `n` items.
    pub fn epoch_batches(&mut self, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diagnostic(state: &TrainState, loss: f64, grad: &[f64]) -> String {
    let bad_params = state.model.params.iter().filter(|p| !p.is_finite()).count();
    format!(
        "loss={loss}, grad_norm={}, param_norm={}, non_finite_params={bad_params}, step={}",
        global_norm(grad),
        global_norm(&state.model.params),
        state.step
    )
}

/// Clips `grad` to `cfg.clip_norm` and applies one Adam update to the model.
pub fn apply_gradient(state: &mut TrainState, grad: &mut [f64], loss: f64, cfg: &TrainConfig) -> Result<(), TrainError> {
    let norm = global_norm(grad);
    if !loss.is_finite() || !norm.is_finite() {
        return Err(TrainError::NonFinite { step: state.step, diagnostic: diagnostic(state, loss, grad) });
    }
    adam_update(&mut state.model.params, &mut state.m, &mut state.v, &mut state.step, grad, cfg);
    Ok(())
}

/// Clipped Adam step on raw buffers; `grad` must be finite.
pub fn adam_update(params: &mut [f64], m: &mut [f64], v: &mut [f64], step: &mut u64, grad: &mut [f64], cfg: &TrainConfig) {
    let norm = global_norm(grad);
    if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        let s = cfg.clip_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    let lr = cfg.lr_at(*step);
    *step += 1;
    if lr == 0.0 {
        return;
    }
    let t = *step as i32;
    let (bc1, bc2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (((p, g), m), v) in params.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
    }
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step(state: &mut TrainState, batch: &[Example], cfg: &TrainConfig) -> Result<f64, TrainError> {
    let mut grad = vec![0.0; state.model.params.len()];
    let loss = state.model.loss_and_grad(batch, &mut grad)?;
    apply_gradient(state, &mut grad, loss, cfg)?;
    Ok(loss)
}
