//! Integer label images shared by every stage of the pipeline.

use std::collections::BTreeSet;
use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::imageops::IoError;

/// Whether a map (or a task) groups pixels by category or by instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Category,
    Instance,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Category => "category",
            TaskKind::Instance => "instance",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "category" => Ok(TaskKind::Category),
            "instance" => Ok(TaskKind::Instance),
            other => Err(format!("unknown task kind `{other}` (expected category|instance)")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-pixel segment ids, row-major. Id 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentMap {
    width: u32,
    height: u32,
    ids: Vec<u32>,
    kind: TaskKind,
}

impl SegmentMap {
    pub fn new(width: u32, height: u32, kind: TaskKind) -> Self {
        Self {
            width,
            height,
            ids: vec![0; (width * height) as usize],
            kind,
        }
    }

    /// Panics if `ids.len() != width * height`.
    pub fn from_ids(width: u32, height: u32, ids: Vec<u32>, kind: TaskKind) -> Self {
        assert_eq!(ids.len(), (width * height) as usize, "id buffer does not match dimensions");
        Self { width, height, ids, kind }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: TaskKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u32] {
        &mut self.ids
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.ids[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, id: u32) {
        self.ids[(y * self.width + x) as usize] = id;
    }

    /// Distinct nonzero ids present in the map.
    pub fn id_set(&self) -> BTreeSet<u32> {
        self.ids.iter().copied().filter(|&id| id != 0).collect()
    }

    /// Applies `f` to every id, keeping 0 fixed unless `f` says otherwise.
    pub fn map_ids(&self, mut f: impl FnMut(u32) -> u32) -> SegmentMap {
        SegmentMap {
            width: self.width,
            height: self.height,
            ids: self.ids.iter().map(|&id| f(id)).collect(),
            kind: self.kind,
        }
    }

    /// Keeps only ids in `keep`; everything else becomes background.
    pub fn retain(&self, keep: &BTreeSet<u32>) -> SegmentMap {
        self.map_ids(|id| if keep.contains(&id) { id } else { 0 })
    }

    /// Binary mask of a single id.
    pub fn mask_of(&self, id: u32) -> Vec<bool> {
        self.ids.iter().map(|&v| v == id).collect()
    }

    pub fn to_luma16(&self) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>, IoError> {
        let mut out = Vec::with_capacity(self.ids.len());
        for &id in &self.ids {
            out.push(u16::try_from(id).map_err(|_| IoError::IdOutOfRange(id))?);
        }
        Ok(ImageBuffer::from_raw(self.width, self.height, out).expect("buffer sized from map"))
    }

    pub fn from_luma16(img: &ImageBuffer<Luma<u16>, Vec<u16>>, kind: TaskKind) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            ids: img.as_raw().iter().map(|&v| u32::from(v)).collect(),
            kind,
        }
    }

    /// Encodes as a 16-bit single-channel PNG.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>, IoError> {
        let img = self.to_luma16()?;
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8], kind: TaskKind) -> Result<Self, IoError> {
        Self::from_dynamic(image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?, kind)
    }

    /// Ids are read verbatim from 8- or 16-bit single-channel images.
    fn from_dynamic(img: image::DynamicImage, kind: TaskKind) -> Result<Self, IoError> {
        match img {
            image::DynamicImage::ImageLuma16(g) => Ok(Self::from_luma16(&g, kind)),
            image::DynamicImage::ImageLuma8(g) => Ok(Self {
                width: g.width(),
                height: g.height(),
                ids: g.as_raw().iter().map(|&v| u32::from(v)).collect(),
                kind,
            }),
            other => Err(IoError::Malformed(format!(
                "segment maps must be single-channel grayscale, got {:?}",
                other.color()
            ))),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        self.to_luma16()?.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>, kind: TaskKind) -> Result<Self, IoError> {
        Self::from_dynamic(image::open(path)?, kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_keeps_wide_ids() {
        let map = SegmentMap::from_ids(3, 2, vec![0, 1, 300, 65535, 7, 0], TaskKind::Instance);
        let bytes = map.to_png_bytes().unwrap();
        let back = SegmentMap::from_png_bytes(&bytes, TaskKind::Instance).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn eight_bit_masks_are_read_verbatim() {
        let g = image::GrayImage::from_raw(2, 1, vec![3, 200]).unwrap();
        let mut buf = std::io::Cursor::new(Vec::new());
        g.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        let map = SegmentMap::from_png_bytes(buf.get_ref(), TaskKind::Category).unwrap();
        assert_eq!(map.ids(), &[3, 200]);
        let rgb = image::RgbImage::new(2, 2);
        let mut buf = std::io::Cursor::new(Vec::new());
        rgb.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        assert!(matches!(
            SegmentMap::from_png_bytes(buf.get_ref(), TaskKind::Category),
            Err(IoError::Malformed(_))
        ));
    }

    #[test]
    fn ids_above_u16_are_rejected() {
        let map = SegmentMap::from_ids(1, 1, vec![70_000], TaskKind::Category);
        assert!(matches!(map.to_png_bytes(), Err(IoError::IdOutOfRange(70_000))));
    }

    #[test]
    fn retain_zeroes_other_ids() {
        let map = SegmentMap::from_ids(4, 1, vec![1, 2, 3, 0], TaskKind::Category);
        let kept = map.retain(&[2].into_iter().collect());
        assert_eq!(kept.ids(), &[0, 2, 0, 0]);
        assert_eq!(kept.id_set(), [2].into_iter().collect());
    }
}
