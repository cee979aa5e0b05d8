//! Small raster helpers: crops, flips, stitching, resampling and PNG IO.
//!
//! Geometric operations on a source image and its segment map go through the
//! same [`Warp`] so both stay pixel-aligned. Maps are always sampled with
//! nearest neighbour; RGB sources use bilinear interpolation at the same
//! sampling positions.

use std::path::Path;

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::segmap::SegmentMap;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("segment id {0} does not fit in a 16-bit PNG")]
    IdOutOfRange(u32),
    #[error("malformed file: {0}")]
    Malformed(String),
}

/// Axis-aligned resampling window: output pixel `(ox, oy)` samples the input
/// at `(x0 + (ox + 0.5) * w / out_w - 0.5, ...)`, optionally mirrored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warp {
    pub x0: f32,
    pub y0: f32,
    pub w: f32,
    pub h: f32,
    pub out_w: u32,
    pub out_h: u32,
    pub flip: bool,
}

impl Warp {
    pub fn identity(width: u32, height: u32) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            w: width as f32,
            h: height as f32,
            out_w: width,
            out_h: height,
            flip: false,
        }
    }

    /// Full-extent resize to `out_w × out_h`.
    pub fn resize(width: u32, height: u32, out_w: u32, out_h: u32) -> Self {
        Self {
            out_w,
            out_h,
            ..Self::identity(width, height)
        }
    }

    #[inline]
    fn source_xy(&self, ox: u32, oy: u32) -> (f32, f32) {
        let ox = if self.flip { self.out_w - 1 - ox } else { ox };
        let sx = self.x0 + (ox as f32 + 0.5) * self.w / self.out_w as f32 - 0.5;
        let sy = self.y0 + (oy as f32 + 0.5) * self.h / self.out_h as f32 - 0.5;
        (sx, sy)
    }

    pub fn apply_map(&self, map: &SegmentMap) -> SegmentMap {
        let (w, h) = map.dimensions();
        let mut out = SegmentMap::new(self.out_w, self.out_h, map.kind());
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let (sx, sy) = self.source_xy(ox, oy);
                let ix = (sx.round() as i64).clamp(0, w as i64 - 1) as u32;
                let iy = (sy.round() as i64).clamp(0, h as i64 - 1) as u32;
                out.set(ox, oy, map.get(ix, iy));
            }
        }
        out
    }

    pub fn apply_nearest(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = img.dimensions();
        RgbImage::from_fn(self.out_w, self.out_h, |ox, oy| {
            let (sx, sy) = self.source_xy(ox, oy);
            let ix = (sx.round() as i64).clamp(0, w as i64 - 1) as u32;
            let iy = (sy.round() as i64).clamp(0, h as i64 - 1) as u32;
            *img.get_pixel(ix, iy)
        })
    }

    pub fn apply_bilinear(&self, img: &RgbImage) -> RgbImage {
        let (w, h) = img.dimensions();
        RgbImage::from_fn(self.out_w, self.out_h, |ox, oy| {
            let (sx, sy) = self.source_xy(ox, oy);
            let sx = sx.clamp(0.0, (w - 1) as f32);
            let sy = sy.clamp(0.0, (h - 1) as f32);
            let x0 = sx.floor() as u32;
            let y0 = sy.floor() as u32;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            let p00 = img.get_pixel(x0, y0).0;
            let p10 = img.get_pixel(x1, y0).0;
            let p01 = img.get_pixel(x0, y1).0;
            let p11 = img.get_pixel(x1, y1).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f32 * (1.0 - fx) + p10[c] as f32 * fx;
                let bot = p01[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
                px[c] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
            Rgb(px)
        })
    }
}

pub fn hflip(img: &RgbImage) -> RgbImage {
    image::imageops::flip_horizontal(img)
}

pub fn hflip_map(map: &SegmentMap) -> SegmentMap {
    let (w, h) = map.dimensions();
    let mut out = SegmentMap::new(w, h, map.kind());
    for y in 0..h {
        for x in 0..w {
            out.set(w - 1 - x, y, map.get(x, y));
        }
    }
    out
}

/// Horizontal concatenation. Panics on unequal heights.
pub fn hstack(images: &[&RgbImage]) -> RgbImage {
    let h = images[0].height();
    assert!(images.iter().all(|i| i.height() == h), "hstack needs equal heights");
    let w: u32 = images.iter().map(|i| i.width()).sum();
    let mut out = RgbImage::new(w, h);
    let mut off = 0;
    for img in images {
        image::imageops::replace(&mut out, *img, off as i64, 0);
        off += img.width();
    }
    out
}

pub fn hstack_maps(maps: &[&SegmentMap]) -> SegmentMap {
    let h = maps[0].height();
    assert!(maps.iter().all(|m| m.height() == h), "hstack needs equal heights");
    let w: u32 = maps.iter().map(|m| m.width()).sum();
    let mut out = SegmentMap::new(w, h, maps[0].kind());
    let mut off = 0;
    for m in maps {
        for y in 0..h {
            for x in 0..m.width() {
                out.set(off + x, y, m.get(x, y));
            }
        }
        off += m.width();
    }
    out
}

/// Box-filter downsample by an integer factor (exact area averaging).
pub fn area_downsample(img: &RgbImage, factor: u32) -> RgbImage {
    assert!(factor >= 1);
    if factor == 1 {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    assert!(w % factor == 0 && h % factor == 0, "image not divisible by factor");
    let n = (factor * factor) as f32;
    RgbImage::from_fn(w / factor, h / factor, |ox, oy| {
        let mut acc = [0u32; 3];
        for dy in 0..factor {
            for dx in 0..factor {
                let p = img.get_pixel(ox * factor + dx, oy * factor + dy).0;
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
            }
        }
        Rgb(acc.map(|a| (a as f32 / n).round() as u8))
    })
}

pub fn rgb_to_png_bytes(img: &RgbImage) -> Result<Vec<u8>, IoError> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn rgb_from_png_bytes(bytes: &[u8]) -> Result<RgbImage, IoError> {
    Ok(image::load_from_memory(bytes)?.into_rgb8())
}

pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage, IoError> {
    Ok(image::open(path)?.into_rgb8())
}

pub fn save_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<(), IoError> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
