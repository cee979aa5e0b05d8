use std::collections::BTreeSet;

use image::RgbImage;
use rand::seq::IteratorRandom;
use rand::Rng;

use super::{recolor, sample_palette, Palette, PaletteError};
use crate::data::LabeledSample;
use crate::imageops::{hstack, hstack_maps, Warp};
use crate::segmap::{SegmentMap, TaskKind};

/// Two (source, target) pairs colored with one palette.
#[derive(Clone, Debug, PartialEq)]
pub struct InContextPair {
    pub example_source: RgbImage,
    pub example_target: RgbImage,
    pub query_source: RgbImage,
    /// Ground truth; absent at inference.
    pub query_target: Option<RgbImage>,
    /// Query ids restricted to the colored set, when known.
    pub query_map: Option<SegmentMap>,
    pub palette: Palette,
    pub kind: TaskKind,
}

impl InContextPair {
    /// Inference-time pair: the query target is unknown.
    pub fn for_inference(
        example_source: RgbImage,
        example_target: RgbImage,
        query_source: RgbImage,
        palette: Palette,
        kind: TaskKind,
    ) -> Self {
        Self {
            example_source,
            example_target,
            query_source,
            query_target: None,
            query_map: None,
            palette,
            kind,
        }
    }

    pub fn dimensions(&self) -> (u32, u32) {
        self.example_source.dimensions()
    }
}

/// Which ids of the two maps receive colors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IdSelection {
    /// A random subset of the ids present in both maps, `min..=max` of them.
    Shared {
        min: usize,
        max: usize,
    },
    /// Every id present in either map.
    All,
    Explicit(BTreeSet<u32>),
}

impl Default for IdSelection {
    fn default() -> Self {
        IdSelection::Shared { min: 1, max: 4 }
    }
}

impl IdSelection {
    fn choose<R: Rng + ?Sized>(&self, ex: &BTreeSet<u32>, q: &BTreeSet<u32>, rng: &mut R) -> BTreeSet<u32> {
        match self {
            IdSelection::Shared { min, max } => {
                let shared: Vec<u32> = ex.intersection(q).copied().collect();
                if shared.is_empty() {
                    return BTreeSet::new();
                }
                let hi = (*max).min(shared.len()).max(1);
                let lo = (*min).clamp(1, hi);
                let n = rng.random_range(lo..=hi);
                shared.into_iter().choose_multiple(rng, n).into_iter().collect()
            }
            IdSelection::All => ex.union(q).copied().collect(),
            IdSelection::Explicit(ids) => ids.clone(),
        }
    }
}

/// Builds an in-context pair: selects ids, samples one palette over them and
/// recolors both targets with it. Unselected ids become background.
pub fn make_incontext_pair<R: Rng + ?Sized>(
    example: &LabeledSample,
    query: &LabeledSample,
    kind: TaskKind,
    selection: &IdSelection,
    rng: &mut R,
) -> Result<InContextPair, PaletteError> {
    if example.source.dimensions() != query.source.dimensions() {
        return Err(PaletteError::BadGeometry(format!(
            "example is {:?} but query is {:?}",
            example.source.dimensions(),
            query.source.dimensions()
        )));
    }
    let ex_map = example.segment_map(kind);
    let q_map = query.segment_map(kind);
    let selected = selection.choose(&ex_map.id_set(), &q_map.id_set(), rng);
    let palette = sample_palette(&selected, rng)?;
    let ex_map = ex_map.retain(&selected);
    let q_map = q_map.retain(&selected);
    Ok(InContextPair {
        example_source: example.source.clone(),
        example_target: recolor(&ex_map, &palette)?,
        query_source: query.source.clone(),
        query_target: Some(recolor(&q_map, &palette)?),
        query_map: Some(q_map),
        palette,
        kind,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixConfig {
    /// Output side length in pixels.
    pub out_size: u32,
    /// Smallest crop extent per axis, relative to the stitched image.
    pub min_crop: f32,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            out_size: 64,
            min_crop: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub source: RgbImage,
    pub target: RgbImage,
    pub map: SegmentMap,
}

/// Stitches same-palette samples left to right, crops one random window
/// (shared by source and target) and resizes it to `out_size`.
pub fn mix_context<R: Rng + ?Sized>(
    parts: &[(RgbImage, SegmentMap)],
    palette: &Palette,
    cfg: MixConfig,
    rng: &mut R,
) -> Result<MixedSample, PaletteError> {
    if parts.len() < 2 {
        return Err(PaletteError::TooFewSamples);
    }
    let h = parts[0].0.height();
    if parts.iter().any(|(s, m)| s.height() != h || s.dimensions() != m.dimensions()) {
        return Err(PaletteError::BadGeometry("mix-context parts need equal heights".into()));
    }
    for (_, m) in parts {
        if let Some(id) = m.id_set().into_iter().find(|&id| palette.get(id).is_none()) {
            return Err(PaletteError::MissingEntry(id));
        }
    }
    let sources: Vec<&RgbImage> = parts.iter().map(|(s, _)| s).collect();
    let maps: Vec<&SegmentMap> = parts.iter().map(|(_, m)| m).collect();
    let source = hstack(&sources);
    let map = hstack_maps(&maps);
    let (w, h) = source.dimensions();

    let min_crop = cfg.min_crop.clamp(0.0, 1.0);
    let sx = if min_crop < 1.0 { rng.random_range(min_crop..=1.0) } else { 1.0 };
    let sy = if min_crop < 1.0 { rng.random_range(min_crop..=1.0) } else { 1.0 };
    let cw = w as f32 * sx;
    let ch = h as f32 * sy;
    let x0 = if cw < w as f32 {
        rng.random_range(0.0..=(w as f32 - cw))
    } else {
        0.0
    };
    let y0 = if ch < h as f32 {
        rng.random_range(0.0..=(h as f32 - ch))
    } else {
        0.0
    };
    let warp = Warp {
        x0,
        y0,
        w: cw,
        h: ch,
        out_w: cfg.out_size,
        out_h: cfg.out_size,
        flip: false,
    };
    let map = warp.apply_map(&map);
    // Targets are re-rendered from the cropped map so colors never blend.
    let target = recolor(&map, palette)?;
    Ok(MixedSample {
        source: warp.apply_bilinear(&source),
        target,
        map,
    })
}
