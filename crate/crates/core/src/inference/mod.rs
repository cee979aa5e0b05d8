//! Prediction from one or several in-context examples, and video propagation.

mod vos;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageops::area_downsample;
use crate::model::{decoded_to_image, normalize_u8, CanvasInput, EnsembleHook, ModelError, ModelState, Real};
use crate::palette::{decode, Palette, PaletteError};
use crate::segmap::{SegmentMap, TaskKind};

pub use vos::{vos_run, vos_run_with, VosState, DEFAULT_K};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid ensemble: {0}")]
    InvalidSpec(String),
    #[error("{examples} examples do not fit a {grid_n}x{grid_n} grid")]
    GridOverflow { examples: usize, grid_n: u32 },
    #[error("video has no frames")]
    EmptyVideo,
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Single,
    Spatial,
    Feature,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Single => "single",
            Strategy::Spatial => "spatial",
            Strategy::Feature => "feature",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Strategy::Single),
            "spatial" => Ok(Strategy::Spatial),
            "feature" => Ok(Strategy::Feature),
            other => Err(format!("unknown strategy {other:?} (expected single, spatial or feature)")),
        }
    }
}

/// Example pairs plus how to combine them.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSpec {
    pub strategy: Strategy,
    /// `(source, colored target)` pairs.
    pub examples: Vec<(RgbImage, RgbImage)>,
    pub grid_n: u32,
}

impl EnsembleSpec {
    pub fn single(source: RgbImage, target: RgbImage) -> Self {
        Self {
            strategy: Strategy::Single,
            examples: vec![(source, target)],
            grid_n: 1,
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        match self.strategy {
            Strategy::Single if self.examples.len() != 1 => Err(InferenceError::InvalidSpec(format!(
                "single strategy needs exactly 1 example, got {}",
                self.examples.len()
            ))),
            Strategy::Spatial => {
                if self.grid_n == 0 || self.examples.is_empty() {
                    return Err(InferenceError::InvalidSpec(
                        "spatial strategy needs grid_n ≥ 1 and an example".into(),
                    ));
                }
                if self.examples.len() > (self.grid_n * self.grid_n) as usize {
                    return Err(InferenceError::GridOverflow {
                        examples: self.examples.len(),
                        grid_n: self.grid_n,
                    });
                }
                Ok(())
            }
            Strategy::Feature if self.examples.is_empty() => {
                Err(InferenceError::InvalidSpec("feature strategy needs at least 1 example".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Tiles the examples row-major into an `n × n` grid (empty cells black) and
/// area-downsamples back to one example's size.
pub fn spatial_ensemble(examples: &[(RgbImage, RgbImage)], grid_n: u32) -> Result<(RgbImage, RgbImage), InferenceError> {
    if grid_n == 0 || examples.is_empty() {
        return Err(InferenceError::InvalidSpec(
            "spatial ensemble needs grid_n ≥ 1 and an example".into(),
        ));
    }
    if examples.len() > (grid_n * grid_n) as usize {
        return Err(InferenceError::GridOverflow {
            examples: examples.len(),
            grid_n,
        });
    }
    let (w, h) = examples[0].0.dimensions();
    if examples.iter().any(|(s, t)| s.dimensions() != (w, h) || t.dimensions() != (w, h)) {
        return Err(InferenceError::Geometry("examples differ in size".into()));
    }
    if grid_n == 1 {
        return Ok(examples[0].clone());
    }
    let mut src = RgbImage::new(w * grid_n, h * grid_n);
    let mut tgt = RgbImage::new(w * grid_n, h * grid_n);
    for (i, (s, t)) in examples.iter().enumerate() {
        let (cx, cy) = (i as u32 % grid_n, i as u32 / grid_n);
        image::imageops::replace(&mut src, s, (cx * w) as i64, (cy * h) as i64);
        image::imageops::replace(&mut tgt, t, (cx * w) as i64, (cy * h) as i64);
    }
    Ok((area_downsample(&src, grid_n), area_downsample(&tgt, grid_n)))
}

/// Inference canvas `[source | target ; query | black]` with the whole
/// query-target quadrant masked.
pub fn inference_input<T: Real>(
    model: &ModelState<T>,
    source: &RgbImage,
    target: &RgbImage,
    query: &RgbImage,
) -> Result<CanvasInput<T>, InferenceError> {
    let cfg = model.config();
    let side = cfg.image_side();
    for (name, img) in [("example source", source), ("example target", target), ("query", query)] {
        if img.dimensions() != (side, side) {
            return Err(InferenceError::Geometry(format!(
                "{name} is {:?}, model expects {side}x{side}",
                img.dimensions()
            )));
        }
    }
    let full = cfg.canvas_side as usize;
    let s = side as usize;
    let mut pixels = vec![normalize_u8::<T>(0); full * full * 3];
    let mut put = |img: &RgbImage, ox: usize, oy: usize| {
        for (x, y, px) in img.enumerate_pixels() {
            let o = ((oy + y as usize) * full + ox + x as usize) * 3;
            for c in 0..3 {
                pixels[o + c] = normalize_u8(px.0[c]);
            }
        }
    };
    put(source, 0, 0);
    put(target, s, 0);
    put(query, 0, s);
    let mut mask = vec![false; cfg.tokens()];
    for t in cfg.query_target_tokens() {
        mask[t] = true;
    }
    Ok(CanvasInput { pixels, mask })
}

/// Pre-decode output: decoder values (normalized pixel scale, patch layout)
/// averaged over canvases, plus the rendered query-target image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub values: Vec<T>,
    pub image: RgbImage,
}

/// Elementwise mean, summed in sorted order so the result does not depend on
/// the order of `outs`; identical inputs return that value exactly.
pub(crate) fn order_free_mean<T: Real>(outs: &[Vec<T>]) -> Vec<T> {
    if outs.len() == 1 {
        return outs[0].clone();
    }
    let inv = T::one() / T::lit(outs.len() as f64);
    let mut vals = vec![T::zero(); outs.len()];
    (0..outs[0].len())
        .map(|i| {
            for (k, o) in outs.iter().enumerate() {
                vals[k] = o[i];
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            if vals[0] == vals[vals.len() - 1] {
                vals[0]
            } else {
                vals.iter().copied().fold(T::zero(), |acc, v| acc + v) * inv
            }
        })
        .collect()
}

pub fn predict_image<T: Real>(
    model: &ModelState<T>,
    spec: &EnsembleSpec,
    query: &RgbImage,
    kind: TaskKind,
) -> Result<Prediction<T>, InferenceError> {
    spec.validate()?;
    let values = match spec.strategy {
        Strategy::Single => {
            let (s, t) = &spec.examples[0];
            model.forward(&inference_input(model, s, t, query)?, kind)?
        }
        Strategy::Spatial => {
            let (s, t) = spatial_ensemble(&spec.examples, spec.grid_n)?;
            model.forward(&inference_input(model, &s, &t, query)?, kind)?
        }
        Strategy::Feature => {
            let inputs = spec
                .examples
                .iter()
                .map(|(s, t)| inference_input(model, s, t, query))
                .collect::<Result<Vec<_>, _>>()?;
            let hook = EnsembleHook {
                average_query: true,
                record: false,
            };
            let (outs, _) = model.forward_ensemble(&inputs, kind, hook)?;
            order_free_mean(&outs)
        }
    };
    let image = decoded_to_image(&values, model.config());
    Ok(Prediction { values, image })
}

/// Predicted segment map: the rendered prediction decoded with `palette`.
pub fn predict<T: Real>(
    model: &ModelState<T>,
    spec: &EnsembleSpec,
    query: &RgbImage,
    kind: TaskKind,
    palette: &Palette,
) -> Result<SegmentMap, InferenceError> {
    let pred = predict_image(model, spec, query, kind)?;
    Ok(decode(&pred.image, palette, kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use image::Rgb;

    fn solid(side: u32, c: [u8; 3]) -> RgbImage {
        RgbImage::from_pixel(side, side, Rgb(c))
    }

    #[test]
    fn spatial_grid_one_is_identity() {
        let ex = (solid(4, [1, 2, 3]), solid(4, [9, 9, 9]));
        assert_eq!(spatial_ensemble(&[ex.clone()], 1).unwrap(), ex);
    }

    #[test]
    fn spatial_placement_is_row_major() {
        let colors = [[40u8, 0, 0], [0, 80, 0], [0, 0, 120]];
        let exs: Vec<_> = colors.iter().map(|&c| (solid(4, c), solid(4, c))).collect();
        let (s, _) = spatial_ensemble(&exs, 2).unwrap();
        assert_eq!(s.get_pixel(0, 0).0, colors[0]);
        assert_eq!(s.get_pixel(3, 0).0, colors[1]);
        assert_eq!(s.get_pixel(0, 3).0, colors[2]);
        assert_eq!(s.get_pixel(3, 3).0, [0, 0, 0]);
    }

    #[test]
    fn spec_validation() {
        let ex = (solid(4, [0; 3]), solid(4, [0; 3]));
        let over = EnsembleSpec {
            strategy: Strategy::Spatial,
            examples: vec![ex.clone(); 5],
            grid_n: 2,
        };
        assert!(matches!(over.validate(), Err(InferenceError::GridOverflow { .. })));
        let two_single = EnsembleSpec {
            strategy: Strategy::Single,
            examples: vec![ex.clone(); 2],
            grid_n: 1,
        };
        assert!(two_single.validate().is_err());
        let empty = EnsembleSpec {
            strategy: Strategy::Feature,
            examples: vec![],
            grid_n: 1,
        };
        assert!(empty.validate().is_err());
    }

    #[test]
    fn duplicated_feature_examples_match_single_exactly() {
        let cfg = ModelConfig {
            patch: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            canvas_side: 16,
            seed: 9,
            ..Default::default()
        };
        let model = ModelState::<f32>::init(cfg).unwrap();
        let mut src = RgbImage::new(8, 8);
        for (x, y, p) in src.enumerate_pixels_mut() {
            *p = Rgb([(x * 30) as u8, (y * 30) as u8, 7]);
        }
        let tgt = solid(8, [200, 10, 10]);
        let q = solid(8, [50, 60, 70]);
        let single = predict_image(&model, &EnsembleSpec::single(src.clone(), tgt.clone()), &q, TaskKind::Category).unwrap();
        let feat = predict_image(
            &model,
            &EnsembleSpec {
                strategy: Strategy::Feature,
                examples: vec![(src, tgt); 3],
                grid_n: 1,
            },
            &q,
            TaskKind::Category,
        )
        .unwrap();
        assert_eq!(single, feat);
    }

    #[test]
    fn strategy_parsing() {
        for s in [Strategy::Single, Strategy::Spatial, Strategy::Feature] {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("mean".parse::<Strategy>().is_err());
    }
}
