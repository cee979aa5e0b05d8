//! Optimization: AdamW with warmup + cosine schedule, the training step and
//! loop, and prompt tuning against a frozen model.

mod adamw;
pub mod config;
mod prompt;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::model::{smooth_l1, CanvasInput, GradRequest, ModelError, ModelState, Real};
use crate::parallel;
use crate::segmap::TaskKind;

pub use adamw::{AdamParams, AdamW};
pub use config::{apply_kv, parse_kv, render_kv, ConfigError, KvConfig};
pub use prompt::{tune_prompt, PromptConfig, PromptTensor, TuneReport};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("non-finite gradient at step {step} (parameter {index})")]
    NonFiniteGradient { step: usize, index: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 0.05,
            batch_size: 8,
            total_steps: 2000,
            warmup_steps: 400,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return bad("batch_size and total_steps must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return bad("warmup_steps must not exceed total_steps");
        }
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.betas.0) || !beta_ok(self.betas.1) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        Ok(())
    }

    pub fn adam_params(&self, lr: f64) -> AdamParams {
        AdamParams {
            lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at
/// `total_steps`. Steps beyond the end are clamped.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    let progress = if span == 0 {
        1.0
    } else {
        (step - cfg.warmup_steps) as f64 / span as f64
    };
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Loss of one canvas and the gradient of that loss w.r.t. the decoder output.
pub(crate) fn canvas_loss<T: Real>(model: &ModelState<T>, input: &CanvasInput<T>, out: &[T]) -> Result<(T, Vec<T>), ModelError> {
    let cfg = model.config();
    let target = input.query_target_values(cfg);
    let mask: Vec<bool> = cfg.query_target_tokens().iter().map(|&t| input.mask[t]).collect();
    smooth_l1(out, &target, &mask, cfg.patch_values())
}

/// Batch-mean loss and summed-then-averaged parameter gradients. Per-canvas
/// work runs in parallel; the reduction is in batch order.
pub fn batch_gradients<T: Real>(model: &ModelState<T>, batch: &[(CanvasInput<T>, TaskKind)]) -> Result<(f64, Vec<T>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let per: Vec<Result<(T, Vec<T>), ModelError>> = parallel::map(batch, |(input, kind)| {
        let (out, trace) = model.forward_train(input, *kind)?;
        let (loss, d_out) = canvas_loss(model, input, &out)?;
        let g = model.backward(
            input,
            *kind,
            &trace,
            &d_out,
            GradRequest {
                params: true,
                input: false,
            },
        );
        Ok((loss, g.params))
    });
    let inv = T::one() / T::lit(batch.len() as f64);
    let mut loss = 0.0;
    let mut grads = vec![T::zero(); model.param_count()];
    for r in per {
        let (l, g) = r?;
        loss += l.as_f64();
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    grads.iter_mut().for_each(|g| *g = *g * inv);
    Ok((loss / batch.len() as f64, grads))
}

/// One AdamW update at `cosine_lr(step)`. Returns the batch loss measured
/// before the update.
pub fn train_step<T: Real>(
    model: &mut ModelState<T>,
    batch: &[(CanvasInput<T>, TaskKind)],
    opt: &mut AdamW<T>,
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64, TrainError> {
    let (loss, grads) = batch_gradients(model, batch)?;
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step, loss });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { step, index });
    }
    let decay = model.layout().decay_mask();
    opt.step(model.params_mut(), &grads, &decay, &cfg.adam_params(cosine_lr(step, cfg)));
    Ok(loss)
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
}

/// Runs `cfg.total_steps` steps. `next_batch(step)` supplies each batch;
/// `log` receives one `step=<int> lr=<float> loss=<float>` line per step and
/// `on_step` is called after every update.
pub fn train<F, C>(
    model: &mut ModelState<f32>,
    cfg: &TrainConfig,
    mut next_batch: F,
    mut log: Option<&mut dyn Write>,
    mut on_step: C,
) -> Result<TrainReport, TrainError>
where
    F: FnMut(usize) -> Result<Vec<(CanvasInput<f32>, TaskKind)>, TrainError>,
    C: FnMut(usize, &ModelState<f32>) -> Result<(), TrainError>,
{
    cfg.validate()?;
    let mut opt = AdamW::new(model.param_count());
    let mut report = TrainReport::default();
    for step in 0..cfg.total_steps {
        let batch = next_batch(step)?;
        let lr = cosine_lr(step, cfg);
        let loss = train_step(model, &batch, &mut opt, cfg, step)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "step={step} lr={lr:.6e} loss={loss:.6}")?;
        }
        report.losses.push(loss);
        report.lrs.push(lr);
        on_step(step, model)?;
    }
    Ok(report)
}
