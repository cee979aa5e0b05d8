use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{canvas_loss, TrainError};
use crate::model::{denormalize, normalize_u8, CanvasInput, GradRequest, ModelState};
use crate::parallel;
use crate::rng::seeded;
use crate::segmap::TaskKind;
use crate::train::{AdamParams, AdamW};

/// Learnable example pair in normalized pixel units, row-major RGB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTensor {
    pub side: u32,
    pub source: Vec<f32>,
    pub target: Vec<f32>,
}

impl PromptTensor {
    pub fn from_images(source: &RgbImage, target: &RgbImage) -> Self {
        assert_eq!(source.dimensions(), target.dimensions());
        assert_eq!(source.width(), source.height());
        let norm = |img: &RgbImage| img.as_raw().iter().map(|&v| normalize_u8::<f32>(v)).collect();
        Self {
            side: source.width(),
            source: norm(source),
            target: norm(target),
        }
    }

    /// Quantized to 8-bit images, usable as an ordinary example pair.
    pub fn to_images(&self) -> (RgbImage, RgbImage) {
        let img = |v: &[f32]| {
            RgbImage::from_fn(self.side, self.side, |x, y| {
                let o = ((y * self.side + x) * 3) as usize;
                Rgb([denormalize(v[o]), denormalize(v[o + 1]), denormalize(v[o + 2])])
            })
        };
        (img(&self.source), img(&self.target))
    }

    pub fn is_finite(&self) -> bool {
        self.source.iter().chain(&self.target).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Also optimize the example-source half (otherwise only the target).
    pub learn_source: bool,
    pub seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.01,
            batch_size: 4,
            learn_source: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub losses: Vec<f64>,
    /// Mean absolute prompt gradient of the first step.
    pub first_grad_norm: f64,
}

fn tuning_input(model: &ModelState<f32>, prompt: &PromptTensor, query: &RgbImage, target: &RgbImage) -> CanvasInput<f32> {
    let cfg = model.config();
    let full = cfg.canvas_side as usize;
    let s = prompt.side as usize;
    let mut pixels = vec![0f32; full * full * 3];
    for y in 0..s {
        let row = |ox: usize| ((y * full) + ox) * 3;
        pixels[row(0)..row(0) + s * 3].copy_from_slice(&prompt.source[y * s * 3..(y + 1) * s * 3]);
        pixels[row(s)..row(s) + s * 3].copy_from_slice(&prompt.target[y * s * 3..(y + 1) * s * 3]);
    }
    for (img, ox) in [(query, 0usize), (target, s)] {
        for (x, y, px) in img.enumerate_pixels() {
            let o = (((s + y as usize) * full) + ox + x as usize) * 3;
            for c in 0..3 {
                pixels[o + c] = normalize_u8(px.0[c]);
            }
        }
    }
    let mut mask = vec![false; cfg.tokens()];
    for t in cfg.query_target_tokens() {
        mask[t] = true;
    }
    CanvasInput { pixels, mask }
}

/// Optimizes the prompt pair so that the frozen `model` maps each query
/// source of `task` to its colored target. Only the prompt changes; the
/// model is borrowed immutably.
pub fn tune_prompt(
    model: &ModelState<f32>,
    init: PromptTensor,
    task: &[(RgbImage, RgbImage)],
    kind: TaskKind,
    cfg: &PromptConfig,
) -> Result<(PromptTensor, TuneReport), TrainError> {
    if task.is_empty() || cfg.batch_size == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let side = model.config().image_side();
    if init.side != side
        || task
            .iter()
            .any(|(q, t)| q.dimensions() != (side, side) || t.dimensions() != (side, side))
    {
        return Err(crate::model::ModelError::GeometryMismatch(format!("prompt and task images must be {side}x{side}")).into());
    }
    let mut prompt = init;
    let mut rng = seeded(cfg.seed);
    let n = prompt.source.len();
    let mut opt = AdamW::<f32>::new(2 * n);
    let hp = AdamParams {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let full = model.config().canvas_side as usize;
    let s = side as usize;
    let mut report = TuneReport {
        losses: Vec::with_capacity(cfg.steps),
        first_grad_norm: 0.0,
    };
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..task.len())).collect();
        let per = parallel::map(&picks, |&i| -> Result<(f64, Vec<f32>), TrainError> {
            let input = tuning_input(model, &prompt, &task[i].0, &task[i].1);
            let (out, trace) = model.forward_train(&input, kind)?;
            let (loss, d_out) = canvas_loss(model, &input, &out)?;
            let g = model.backward(
                &input,
                kind,
                &trace,
                &d_out,
                GradRequest {
                    params: false,
                    input: true,
                },
            );
            Ok((loss as f64, g.input))
        });
        let inv = 1.0 / cfg.batch_size as f32;
        let mut grad = vec![0f32; 2 * n];
        let mut loss = 0.0;
        for r in per {
            let (l, g) = r?;
            loss += l;
            for y in 0..s {
                let src = (y * full) * 3;
                let tgt = (y * full + s) * 3;
                for i in 0..s * 3 {
                    grad[y * s * 3 + i] += g[src + i] * inv;
                    grad[n + y * s * 3 + i] += g[tgt + i] * inv;
                }
            }
        }
        loss /= cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss });
        }
        if !cfg.learn_source {
            grad[..n].iter_mut().for_each(|g| *g = 0.0);
        }
        if step == 0 {
            report.first_grad_norm = grad.iter().map(|g| g.abs() as f64).sum::<f64>() / grad.len() as f64;
        }
        let mut flat: Vec<f32> = prompt.source.iter().chain(&prompt.target).copied().collect();
        opt.step(&mut flat, &grad, &[], &hp);
        // keep the prompt inside the valid pixel range
        for v in &mut flat {
            *v = v.clamp(-1.0, 1.0);
        }
        prompt.source.copy_from_slice(&flat[..n]);
        prompt.target.copy_from_slice(&flat[n..]);
        report.losses.push(loss);
    }
    Ok((prompt, report))
}
