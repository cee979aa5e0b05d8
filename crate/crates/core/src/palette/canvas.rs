use image::RgbImage;
use rand::seq::index;
use rand::Rng;

use super::{InContextPair, PaletteError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Quadrant {
    ExampleSource,
    ExampleTarget,
    QuerySource,
    QueryTarget,
}

impl Quadrant {
    pub fn is_target_column(self) -> bool {
        matches!(self, Quadrant::ExampleTarget | Quadrant::QueryTarget)
    }

    pub fn is_query_row(self) -> bool {
        matches!(self, Quadrant::QuerySource | Quadrant::QueryTarget)
    }
}

/// 2×2 model input: `[example_source | example_target]` over
/// `[query_source | query_target]`, plus the per-patch mask plan.
#[derive(Clone, Debug, PartialEq)]
pub struct Canvas {
    pub pixels: RgbImage,
    /// Row-major over the patch grid of the whole canvas.
    pub mask: Vec<bool>,
    pub patch: u32,
}

impl Canvas {
    /// Assembles the 2×2 layout with an all-false mask plan.
    pub fn assemble(pair: &InContextPair, patch: u32) -> Result<Self, PaletteError> {
        let (w, h) = pair.dimensions();
        if patch == 0 || w % patch != 0 || h % patch != 0 {
            return Err(PaletteError::BadGeometry(format!(
                "image {w}x{h} is not divisible by patch {patch}"
            )));
        }
        let imgs = [&pair.example_target, &pair.query_source];
        if imgs.iter().any(|i| i.dimensions() != (w, h)) || pair.query_target.as_ref().is_some_and(|t| t.dimensions() != (w, h)) {
            return Err(PaletteError::BadGeometry("pair images differ in size".into()));
        }
        let mut pixels = RgbImage::new(2 * w, 2 * h);
        image::imageops::replace(&mut pixels, &pair.example_source, 0, 0);
        image::imageops::replace(&mut pixels, &pair.example_target, w as i64, 0);
        image::imageops::replace(&mut pixels, &pair.query_source, 0, h as i64);
        if let Some(t) = &pair.query_target {
            image::imageops::replace(&mut pixels, t, w as i64, h as i64);
        }
        let grid = ((2 * w / patch) * (2 * h / patch)) as usize;
        Ok(Self {
            pixels,
            mask: vec![false; grid],
            patch,
        })
    }

    /// Inference canvas: the whole query-target quadrant is masked.
    pub fn for_inference(pair: &InContextPair, patch: u32) -> Result<Self, PaletteError> {
        let mut c = Self::assemble(pair, patch)?;
        for i in c.query_target_patches() {
            c.mask[i] = true;
        }
        Ok(c)
    }

    /// Patches per canvas row and column.
    pub fn grid(&self) -> (u32, u32) {
        (self.pixels.width() / self.patch, self.pixels.height() / self.patch)
    }

    /// Size of one quadrant in pixels.
    pub fn quadrant_size(&self) -> (u32, u32) {
        (self.pixels.width() / 2, self.pixels.height() / 2)
    }

    pub fn quadrant_of(&self, patch_index: usize) -> Quadrant {
        let (gw, gh) = self.grid();
        let (px, py) = (patch_index as u32 % gw, patch_index as u32 / gw);
        match (px >= gw / 2, py >= gh / 2) {
            (false, false) => Quadrant::ExampleSource,
            (true, false) => Quadrant::ExampleTarget,
            (false, true) => Quadrant::QuerySource,
            (true, true) => Quadrant::QueryTarget,
        }
    }

    /// Canvas patch indices of the query-target quadrant, row-major.
    pub fn query_target_patches(&self) -> Vec<usize> {
        (0..self.mask.len())
            .filter(|&i| self.quadrant_of(i) == Quadrant::QueryTarget)
            .collect()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Bottom-right quadrant pixels.
    pub fn query_target(&self) -> RgbImage {
        let (w, h) = self.quadrant_size();
        image::imageops::crop_imm(&self.pixels, w, h, w, h).to_image()
    }
}

/// Assembles the canvas and masks `⌈mask_ratio · P⌉` uniformly chosen
/// patches of the query-target quadrant (P = patches in that quadrant).
pub fn build_canvas<R: Rng + ?Sized>(pair: &InContextPair, mask_ratio: f64, patch: u32, rng: &mut R) -> Result<Canvas, PaletteError> {
    if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
        return Err(PaletteError::BadGeometry(format!("mask_ratio {mask_ratio} outside (0, 1]")));
    }
    let mut canvas = Canvas::assemble(pair, patch)?;
    let candidates = canvas.query_target_patches();
    let n = ((mask_ratio * candidates.len() as f64).ceil() as usize).min(candidates.len());
    for k in index::sample(rng, candidates.len(), n) {
        canvas.mask[candidates[k]] = true;
    }
    Ok(canvas)
}
