use std::collections::VecDeque;

use image::RgbImage;

use super::{predict_image, EnsembleSpec, InferenceError, Strategy};
use crate::model::{ModelState, Real};
use crate::palette::{decode, recolor, sample_palette};
use crate::rng::seeded;
use crate::segmap::{SegmentMap, TaskKind};

/// Frames used per prediction, counting the annotated first frame.
pub const DEFAULT_K: usize = 8;

/// The annotated first frame plus a FIFO of the most recent predictions.
#[derive(Clone, Debug)]
pub struct VosState {
    first: (RgbImage, RgbImage),
    fifo: VecDeque<(RgbImage, RgbImage)>,
    capacity: usize,
}

impl VosState {
    /// `k` frames per prediction: the first frame and up to `k − 1` of the
    /// latest predicted frames.
    pub fn new(frame0: RgbImage, target0: RgbImage, k: usize) -> Self {
        Self {
            first: (frame0, target0),
            fifo: VecDeque::new(),
            capacity: k.saturating_sub(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fifo_len(&self) -> usize {
        self.fifo.len()
    }

    pub fn push(&mut self, frame: RgbImage, target: RgbImage) {
        if self.capacity == 0 {
            return;
        }
        if self.fifo.len() == self.capacity {
            self.fifo.pop_front();
        }
        self.fifo.push_back((frame, target));
    }

    /// First frame, then queued predictions from newest to oldest.
    pub fn examples(&self) -> Vec<(RgbImage, RgbImage)> {
        std::iter::once(self.first.clone()).chain(self.fifo.iter().rev().cloned()).collect()
    }
}

/// Propagates `first_mask` through `frames` with the feature ensemble.
pub fn vos_run<T: Real>(
    model: &ModelState<T>,
    frames: &[RgbImage],
    first_mask: &SegmentMap,
    k: usize,
    palette_seed: u64,
) -> Result<Vec<SegmentMap>, InferenceError> {
    vos_run_with(model, frames, first_mask, k, Strategy::Feature, palette_seed)
}

/// As [`vos_run`] with an explicit ensemble strategy. `Single` uses only the
/// first frame; `Spatial` tiles the examples into the smallest square grid.
pub fn vos_run_with<T: Real>(
    model: &ModelState<T>,
    frames: &[RgbImage],
    first_mask: &SegmentMap,
    k: usize,
    strategy: Strategy,
    palette_seed: u64,
) -> Result<Vec<SegmentMap>, InferenceError> {
    if frames.is_empty() {
        return Err(InferenceError::EmptyVideo);
    }
    if k == 0 {
        return Err(InferenceError::InvalidSpec("k must be at least 1".into()));
    }
    if first_mask.dimensions() != frames[0].dimensions() {
        return Err(InferenceError::Geometry("first mask does not match frame 0".into()));
    }
    let first = first_mask.clone().with_kind(TaskKind::Instance);
    let ids = first.id_set();
    if ids.is_empty() {
        return Ok(vec![first; frames.len()]);
    }
    let palette = sample_palette(&ids, &mut seeded(palette_seed))?;
    let mut state = VosState::new(
        frames[0].clone(),
        recolor(&first, &palette)?,
        if strategy == Strategy::Single { 1 } else { k },
    );
    let mut out = Vec::with_capacity(frames.len());
    out.push(first);
    for frame in &frames[1..] {
        let examples = state.examples();
        let spec = match strategy {
            Strategy::Single => EnsembleSpec::single(examples[0].0.clone(), examples[0].1.clone()),
            Strategy::Spatial => EnsembleSpec {
                strategy,
                grid_n: (examples.len() as f64).sqrt().ceil() as u32,
                examples,
            },
            Strategy::Feature => EnsembleSpec {
                strategy,
                examples,
                grid_n: 1,
            },
        };
        let pred = predict_image(model, &spec, frame, TaskKind::Instance)?;
        let map = decode(&pred.image, &palette, TaskKind::Instance);
        state.push(frame.clone(), recolor(&map, &palette)?);
        out.push(map);
    }
    Ok(out)
}
