use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabeledSample;
use crate::imageops::Warp;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Output side length.
    pub out_size: u32,
    /// Smallest crop area relative to the input (1.0 disables cropping).
    pub min_crop_area: f32,
    pub flip_prob: f64,
    /// Per-channel gain range for color jitter.
    pub gain: (f32, f32),
    /// Per-channel additive bias range for color jitter.
    pub bias: (f32, f32),
    pub jitter: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            out_size: 64,
            min_crop_area: 0.5,
            flip_prob: 0.5,
            gain: (0.8, 1.2),
            bias: (-16.0, 16.0),
            jitter: true,
        }
    }
}

impl AugmentConfig {
    /// Only flips (always), no crop or jitter.
    pub fn flip_only(out_size: u32) -> Self {
        Self {
            out_size,
            min_crop_area: 1.0,
            flip_prob: 1.0,
            jitter: false,
            ..Self::default()
        }
    }
}

fn random_crop<R: Rng + ?Sized>(w: u32, h: u32, cfg: &AugmentConfig, rng: &mut R) -> (f32, f32, f32, f32) {
    if cfg.min_crop_area >= 1.0 {
        return (0.0, 0.0, w as f32, h as f32);
    }
    let area = rng.random_range(cfg.min_crop_area.max(0.05)..=1.0);
    let log_ratio = rng.random_range((3.0f32 / 4.0).ln()..=(4.0f32 / 3.0).ln());
    let ratio = log_ratio.exp();
    let cw = ((area * ratio).sqrt() * w as f32).min(w as f32);
    let ch = ((area / ratio).sqrt() * h as f32).min(h as f32);
    let x0 = rng.random_range(0.0..=(w as f32 - cw));
    let y0 = rng.random_range(0.0..=(h as f32 - ch));
    (x0, y0, cw, ch)
}

fn jitter(img: &mut RgbImage, gain: [f32; 3], bias: [f32; 3]) {
    for px in img.pixels_mut() {
        for c in 0..3 {
            px.0[c] = (px.0[c] as f32 * gain[c] + bias[c]).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Random resized crop, horizontal flip and color jitter. Geometry is shared
/// by source and map (nearest-neighbour for the map); jitter touches only
/// the source.
pub fn augment<R: Rng + ?Sized>(sample: &LabeledSample, cfg: &AugmentConfig, rng: &mut R) -> LabeledSample {
    let (w, h) = sample.source.dimensions();
    let (x0, y0, cw, ch) = random_crop(w, h, cfg, rng);
    let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let warp = Warp {
        x0,
        y0,
        w: cw,
        h: ch,
        out_w: cfg.out_size,
        out_h: cfg.out_size,
        flip,
    };
    let mut source = warp.apply_bilinear(&sample.source);
    let map = warp.apply_map(&sample.map);
    if cfg.jitter {
        let gain = [(); 3].map(|_| rng.random_range(cfg.gain.0..=cfg.gain.1));
        let bias = [(); 3].map(|_| rng.random_range(cfg.bias.0..=cfg.bias.1));
        jitter(&mut source, gain, bias);
    }
    let present = map.id_set();
    let categories = sample
        .categories
        .iter()
        .filter(|(id, _)| present.contains(id))
        .map(|(&k, &v)| (k, v))
        .collect();
    LabeledSample::new(source, map, categories, sample.dataset_tag.clone())
}

/// An augmented view that keeps every segment id of `sample`. Crops that
/// lose an id are redrawn; after a few failures the view is uncropped.
pub fn transformed_view<R: Rng + ?Sized>(sample: &LabeledSample, cfg: &AugmentConfig, rng: &mut R) -> LabeledSample {
    let ids = sample.map.id_set();
    for _ in 0..8 {
        let view = augment(sample, cfg, rng);
        if view.map.id_set() == ids {
            return view;
        }
    }
    let uncropped = AugmentConfig {
        min_crop_area: 1.0,
        ..*cfg
    };
    augment(sample, &uncropped, rng)
}
