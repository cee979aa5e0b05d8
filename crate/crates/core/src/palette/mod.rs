//! Random coloring: palette sampling, recoloring of segment maps, nearest-color
//! decoding, in-context pair construction and canvas assembly.

mod canvas;
mod pair;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageops::IoError;
use crate::segmap::{SegmentMap, TaskKind};

pub use canvas::{build_canvas, Canvas, Quadrant};
pub use pair::{make_incontext_pair, mix_context, IdSelection, InContextPair, MixConfig, MixedSample};

/// Reserved background color.
pub const BACKGROUND: [u8; 3] = [0, 0, 0];
/// Minimum Euclidean RGB distance between any two palette colors.
pub const DEFAULT_MIN_DISTANCE: f64 = 64.0;
/// Rejection-sampling budget per color.
pub const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum PaletteError {
    #[error("could not place {requested} separated colors (placed {placed} before giving up)")]
    PaletteInfeasible { requested: usize, placed: usize },
    #[error("segment id {0} has no palette entry")]
    MissingEntry(u32),
    #[error("palette needs at least one id")]
    EmptyIds,
    #[error("bad canvas geometry: {0}")]
    BadGeometry(String),
    #[error("mix-context needs at least two samples")]
    TooFewSamples,
}

/// Injective id → color assignment plus a reserved background color.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Palette {
    pub background: [u8; 3],
    pub entries: BTreeMap<u32, [u8; 3]>,
}

#[inline]
fn dist2(a: [u8; 3], b: [u8; 3]) -> u32 {
    let d = |i: usize| (a[i] as i32 - b[i] as i32).pow(2) as u32;
    d(0) + d(1) + d(2)
}

impl Palette {
    pub fn new(background: [u8; 3], entries: BTreeMap<u32, [u8; 3]>) -> Self {
        Self { background, entries }
    }

    pub fn get(&self, id: u32) -> Option<[u8; 3]> {
        if id == 0 {
            Some(self.background)
        } else {
            self.entries.get(&id).copied()
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Smallest pairwise distance over all entries and the background.
    pub fn min_separation(&self) -> f64 {
        let colors: Vec<[u8; 3]> = std::iter::once(self.background).chain(self.entries.values().copied()).collect();
        let mut best = f64::INFINITY;
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                best = best.min((dist2(colors[i], colors[j]) as f64).sqrt());
            }
        }
        best
    }

    /// Nearest palette id for one color. Ties go to the smallest id and
    /// foreground ids beat the background.
    #[inline]
    pub fn nearest(&self, px: [u8; 3]) -> u32 {
        let mut best_id = 0;
        let mut best = u32::MAX;
        for (&id, &c) in &self.entries {
            let d = dist2(px, c);
            if d < best {
                best = d;
                best_id = id;
            }
        }
        if dist2(px, self.background) < best {
            best_id = 0;
        }
        best_id
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("palette serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, IoError> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IoError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Samples a random palette over `ids` with the default separation.
pub fn sample_palette<R: Rng + ?Sized>(ids: &BTreeSet<u32>, rng: &mut R) -> Result<Palette, PaletteError> {
    sample_palette_with(ids, DEFAULT_MIN_DISTANCE, rng)
}

/// Rejection-samples one color per id, in ascending id order, keeping every
/// pair (background included) at least `min_distance` apart.
pub fn sample_palette_with<R: Rng + ?Sized>(ids: &BTreeSet<u32>, min_distance: f64, rng: &mut R) -> Result<Palette, PaletteError> {
    if ids.is_empty() {
        return Err(PaletteError::EmptyIds);
    }
    let min_d2 = min_distance * min_distance;
    let mut placed: Vec<[u8; 3]> = vec![BACKGROUND];
    let mut entries = BTreeMap::new();
    for &id in ids.iter().filter(|&&id| id != 0) {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
            if placed.iter().all(|&p| dist2(p, c) as f64 >= min_d2) {
                found = Some(c);
                break;
            }
        }
        match found {
            Some(c) => {
                placed.push(c);
                entries.insert(id, c);
            }
            None => {
                return Err(PaletteError::PaletteInfeasible {
                    requested: ids.len(),
                    placed: entries.len(),
                })
            }
        }
    }
    Ok(Palette::new(BACKGROUND, entries))
}

/// Paints every pixel with its id's palette color (background for id 0).
pub fn recolor(map: &SegmentMap, palette: &Palette) -> Result<RgbImage, PaletteError> {
    let (w, h) = map.dimensions();
    let mut buf = Vec::with_capacity((w * h * 3) as usize);
    for &id in map.ids() {
        let c = palette.get(id).ok_or(PaletteError::MissingEntry(id))?;
        buf.extend_from_slice(&c);
    }
    Ok(RgbImage::from_raw(w, h, buf).expect("sized buffer"))
}

/// Nearest-color inverse of [`recolor`].
pub fn decode(image: &RgbImage, palette: &Palette, kind: TaskKind) -> SegmentMap {
    let (w, h) = image.dimensions();
    let mut cache: std::collections::HashMap<[u8; 3], u32> = std::collections::HashMap::new();
    let ids = image
        .pixels()
        .map(|Rgb(px)| *cache.entry(*px).or_insert_with(|| palette.nearest(*px)))
        .collect();
    SegmentMap::from_ids(w, h, ids, kind)
}
