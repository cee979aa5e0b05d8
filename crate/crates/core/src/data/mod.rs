//! Labeled samples, the synthetic shapes generator, augmentation, context
//! partner selection and weighted mixture sampling of training canvases.

mod augment;
mod disk;
mod mixture;
mod partner;
mod shapes;

use std::collections::BTreeMap;

use image::RgbImage;
use thiserror::Error;

use crate::imageops::IoError;
use crate::palette::PaletteError;
use crate::segmap::{SegmentMap, TaskKind};

pub use augment::{augment, transformed_view, AugmentConfig};
pub use disk::{load_dataset, load_video, save_dataset, save_video};
pub use mixture::{Dataset, MixtureSampler, MixtureSpec, ParallelSampler, SamplerConfig, TrainingExample};
pub use partner::sample_context_partner;
pub use shapes::{gen_shapes_sample, gen_shapes_sequence, gen_shapes_with_layout, Shape, ShapeKind, ShapeSpec, SHAPES_TAG};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad spec: {0}")]
    BadSpec(String),
    #[error("no pool sample shares a category with the anchor")]
    NoPartner,
    #[error("empty pool")]
    EmptyPool,
    #[error("unknown dataset tag `{0}`")]
    UnknownTag(String),
    #[error("could not draw a valid pair after {0} attempts")]
    Exhausted(usize),
    #[error(transparent)]
    Palette(#[from] PaletteError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Source image with its segment map and the category of every segment id.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub source: RgbImage,
    pub map: SegmentMap,
    pub categories: BTreeMap<u32, u32>,
    pub dataset_tag: String,
}

impl LabeledSample {
    pub fn new(source: RgbImage, map: SegmentMap, categories: BTreeMap<u32, u32>, tag: impl Into<String>) -> Self {
        Self {
            source,
            map,
            categories,
            dataset_tag: tag.into(),
        }
    }

    /// The map at the requested granularity. Category maps replace each id
    /// with its category label.
    pub fn segment_map(&self, kind: TaskKind) -> SegmentMap {
        match kind {
            TaskKind::Instance => self.map.clone().with_kind(TaskKind::Instance),
            TaskKind::Category => self
                .map
                .map_ids(|id| {
                    if id == 0 {
                        0
                    } else {
                        self.categories.get(&id).copied().unwrap_or(0)
                    }
                })
                .with_kind(TaskKind::Category),
        }
    }

    /// Category labels present in the map.
    pub fn category_set(&self) -> std::collections::BTreeSet<u32> {
        self.segment_map(TaskKind::Category).id_set()
    }

    /// Checks dimension agreement and category coverage.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.source.dimensions() != self.map.dimensions() {
            return Err(DataError::BadSpec("map and source dimensions differ".into()));
        }
        if let Some(id) = self.map.id_set().into_iter().find(|id| !self.categories.contains_key(id)) {
            return Err(DataError::BadSpec(format!("segment {id} has no category")));
        }
        Ok(())
    }
}

/// Ordered frames with stable instance ids.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<LabeledSample>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
