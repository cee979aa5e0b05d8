//! `<root>/<tag>/images/*.png`, `<root>/<tag>/maps/*.png` (16-bit) and
//! `<root>/<tag>/meta.json` with per-sample category labels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, LabeledSample, VideoSample};
use crate::imageops::{load_rgb, save_rgb, IoError};
use crate::segmap::{SegmentMap, TaskKind};

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    kind: TaskKind,
    /// Sample name → (segment id → category).
    samples: BTreeMap<String, BTreeMap<u32, u32>>,
}

fn sample_name(i: usize) -> String {
    format!("{i:05}")
}

pub fn save_dataset(root: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    let dir = root.as_ref().join(&dataset.tag);
    std::fs::create_dir_all(dir.join("images")).map_err(IoError::from)?;
    std::fs::create_dir_all(dir.join("maps")).map_err(IoError::from)?;
    let mut meta = Meta {
        kind: dataset.kind,
        samples: BTreeMap::new(),
    };
    for (i, s) in dataset.samples.iter().enumerate() {
        let name = sample_name(i);
        save_rgb(&s.source, dir.join("images").join(format!("{name}.png")))?;
        s.map.save_png(dir.join("maps").join(format!("{name}.png")))?;
        meta.samples.insert(name, s.categories.clone());
    }
    let json = serde_json::to_string_pretty(&meta).map_err(IoError::from)?;
    std::fs::write(dir.join("meta.json"), json).map_err(IoError::from)?;
    Ok(())
}

/// Loads every sample listed in `meta.json`, in name order.
pub fn load_dataset(root: impl AsRef<Path>, tag: &str) -> Result<Dataset, DataError> {
    let dir = root.as_ref().join(tag);
    let meta: Meta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json")).map_err(IoError::from)?).map_err(IoError::from)?;
    let mut samples = Vec::with_capacity(meta.samples.len());
    for (name, categories) in meta.samples {
        let source = load_rgb(dir.join("images").join(format!("{name}.png")))?;
        let map = SegmentMap::load_png(dir.join("maps").join(format!("{name}.png")), TaskKind::Instance)?;
        let sample = LabeledSample::new(source, map, categories, tag);
        sample.validate()?;
        samples.push(sample);
    }
    Ok(Dataset {
        tag: tag.to_string(),
        kind: meta.kind,
        samples,
    })
}

pub fn save_video(root: impl AsRef<Path>, tag: &str, video: &VideoSample) -> Result<(), DataError> {
    save_dataset(
        root,
        &Dataset {
            tag: tag.to_string(),
            kind: TaskKind::Instance,
            samples: video.frames.clone(),
        },
    )
}

pub fn load_video(root: impl AsRef<Path>, tag: &str) -> Result<VideoSample, DataError> {
    Ok(VideoSample {
        frames: load_dataset(root, tag)?.samples,
    })
}
