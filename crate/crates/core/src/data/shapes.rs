//! Procedural scenes of filled ellipses, rectangles and triangles over a
//! textured background. Category = shape type, instance = draw order.

use std::collections::BTreeMap;
use std::f32::consts::PI;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, LabeledSample, VideoSample};
use crate::segmap::{SegmentMap, TaskKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    /// Square image side in pixels.
    pub size: u32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Category `i + 1` is `vocabulary[i]`.
    pub vocabulary: Vec<ShapeKind>,
    /// Half-extent range in pixels.
    pub min_extent: f32,
    pub max_extent: f32,
    /// Base fill per vocabulary entry; `None` draws fills uniformly at random.
    pub category_colors: Option<Vec<[u8; 3]>>,
    /// Per-channel uniform jitter around the base fill.
    pub color_jitter: u8,
    /// Texture amplitude for background and fills.
    pub texture: u8,
    /// Largest per-frame displacement along each axis (sequences only).
    pub max_speed: f32,
    /// Let moving shapes leave the frame or become fully occluded.
    pub allow_exit: bool,
    /// Smallest visible pixel count of a freshly drawn shape.
    pub min_area: usize,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        Self {
            size: 64,
            min_shapes: 1,
            max_shapes: 4,
            vocabulary: vec![ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle],
            min_extent: 6.0,
            max_extent: 16.0,
            category_colors: Some(vec![[215, 55, 55], [55, 200, 70], [70, 90, 225]]),
            color_jitter: 30,
            texture: 24,
            max_speed: 2.0,
            allow_exit: false,
            min_area: 24,
        }
    }
}

impl ShapeSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.vocabulary.is_empty() {
            return Err(DataError::BadSpec("empty shape vocabulary".into()));
        }
        if self.size == 0 {
            return Err(DataError::BadSpec("zero image size".into()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(DataError::BadSpec("shape count range must satisfy 1 <= min <= max".into()));
        }
        if !(self.min_extent > 0.0 && self.min_extent <= self.max_extent) {
            return Err(DataError::BadSpec("extent range must satisfy 0 < min <= max".into()));
        }
        if let Some(c) = &self.category_colors {
            if c.len() != self.vocabulary.len() {
                return Err(DataError::BadSpec("one category color per vocabulary entry".into()));
            }
        }
        if !(self.max_speed >= 0.0) {
            return Err(DataError::BadSpec("negative speed bound".into()));
        }
        Ok(())
    }
}

/// One drawable shape in image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub category: u32,
    pub cx: f32,
    pub cy: f32,
    pub half_w: f32,
    pub half_h: f32,
    pub angle: f32,
    /// Triangle vertex angles (unused for other kinds).
    pub vertex_angles: [f32; 3],
    pub fill: [u8; 3],
    pub texture_seed: u64,
}

impl Shape {
    /// Membership test at pixel center `(x + 0.5, y + 0.5)`.
    pub fn contains(&self, x: u32, y: u32) -> bool {
        let px = x as f32 + 0.5 - self.cx;
        let py = y as f32 + 0.5 - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = c * px + s * py;
        let v = -s * px + c * py;
        match self.kind {
            ShapeKind::Ellipse => (u / self.half_w).powi(2) + (v / self.half_h).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= self.half_w && v.abs() <= self.half_h,
            ShapeKind::Triangle => {
                let p = self.triangle();
                let edge = |a: (f32, f32), b: (f32, f32)| (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0);
                let e0 = edge(p[0], p[1]);
                let e1 = edge(p[1], p[2]);
                let e2 = edge(p[2], p[0]);
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }

    /// Triangle vertices in the shape's local frame.
    pub fn triangle(&self) -> [(f32, f32); 3] {
        self.vertex_angles.map(|a| (self.half_w * a.cos(), self.half_h * a.sin()))
    }

    /// Conservative pixel bounding box `(x0, y0, x1, y1)`, inclusive.
    pub fn bbox(&self) -> (f32, f32, f32, f32) {
        let r = self.half_w.hypot(self.half_h);
        (self.cx - r, self.cy - r, self.cx + r, self.cy + r)
    }

    fn translated(&self, dx: f32, dy: f32) -> Shape {
        Shape {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..self.clone()
        }
    }

    fn shade(&self, x: u32, y: u32, amp: u8) -> [u8; 3] {
        // Texture lives in shape-local coordinates so it moves with the shape.
        let lx = (x as f32 - self.cx).round() as i32;
        let ly = (y as f32 - self.cy).round() as i32;
        let n = hash_noise(self.texture_seed, lx, ly) * amp as f32 * 0.5;
        self.fill.map(|c| (c as f32 + n).round().clamp(0.0, 255.0) as u8)
    }
}

fn hash_noise(seed: u64, x: i32, y: i32) -> f32 {
    let mut z = seed ^ ((x as u32 as u64) << 32 | y as u32 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 40) as f32 / (1u64 << 23) as f32 - 1.0
}

#[derive(Clone, Debug)]
struct Scene {
    background: RgbImage,
    shapes: Vec<Shape>,
}

fn draw_background<R: Rng + ?Sized>(spec: &ShapeSpec, rng: &mut R) -> RgbImage {
    let gray: f32 = rng.random_range(70.0..170.0);
    let tint: [f32; 3] = [
        rng.random_range(-15.0..15.0),
        rng.random_range(-15.0..15.0),
        rng.random_range(-15.0..15.0),
    ];
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let seed: u64 = rng.random();
    let amp = spec.texture as f32;
    RgbImage::from_fn(spec.size, spec.size, |x, y| {
        let wave: f32 = waves
            .iter()
            .map(|&(fx, fy, ph, a)| a * (fx * x as f32 + fy * y as f32 + ph).sin())
            .sum::<f32>()
            / 3.0;
        let grain = hash_noise(seed, x as i32, y as i32) * 0.35;
        let v = gray + amp * (wave + grain);
        Rgb(tint.map(|t| (v + t).round().clamp(0.0, 255.0) as u8))
    })
}

fn draw_shape<R: Rng + ?Sized>(spec: &ShapeSpec, rng: &mut R) -> Shape {
    let vocab_index = rng.random_range(0..spec.vocabulary.len());
    let kind = spec.vocabulary[vocab_index];
    let half_w = rng.random_range(spec.min_extent..=spec.max_extent);
    let half_h = rng.random_range(spec.min_extent..=spec.max_extent);
    let margin = spec.min_extent.min(spec.size as f32 / 4.0);
    let lo = margin;
    let hi = (spec.size as f32 - margin).max(lo + 1.0);
    let cx = rng.random_range(lo..hi);
    let cy = rng.random_range(lo..hi);
    let angle = match kind {
        ShapeKind::Triangle => 0.0,
        _ => rng.random_range(0.0..PI),
    };
    let a0: f32 = rng.random_range(0.0..2.0 * PI);
    let a1 = a0 + rng.random_range(1.7..2.5);
    let a2 = a1 + rng.random_range(1.7..2.5);
    let fill = match &spec.category_colors {
        Some(colors) => {
            let j = spec.color_jitter as i32;
            colors[vocab_index].map(|c| (c as i32 + rng.random_range(-j..=j)).clamp(0, 255) as u8)
        }
        None => [rng.random(), rng.random(), rng.random()],
    };
    Shape {
        kind,
        category: vocab_index as u32 + 1,
        cx,
        cy,
        half_w,
        half_h,
        angle,
        vertex_angles: [a0, a1, a2],
        fill,
        texture_seed: rng.random(),
    }
}

fn raster_area(shape: &Shape, size: u32) -> usize {
    let (x0, y0, x1, y1) = shape.bbox();
    let xs = (x0.floor().max(0.0) as u32)..=(x1.ceil().min(size as f32 - 1.0).max(0.0) as u32);
    let mut n = 0;
    for y in (y0.floor().max(0.0) as u32)..=(y1.ceil().min(size as f32 - 1.0).max(0.0) as u32) {
        for x in xs.clone() {
            n += shape.contains(x, y) as usize;
        }
    }
    n
}

fn draw_scene<R: Rng + ?Sized>(spec: &ShapeSpec, rng: &mut R) -> Scene {
    let background = draw_background(spec, rng);
    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut shape = draw_shape(spec, rng);
        for _ in 0..32 {
            if raster_area(&shape, spec.size) >= spec.min_area {
                break;
            }
            shape = draw_shape(spec, rng);
        }
        shapes.push(shape);
    }
    Scene { background, shapes }
}

/// Paints shapes in order; later shapes overwrite earlier ones in both the
/// image and the map. Instance id = index + 1.
fn render(scene: &Scene, spec: &ShapeSpec, tag: &str) -> LabeledSample {
    let size = spec.size;
    let mut img = scene.background.clone();
    let mut map = SegmentMap::new(size, size, TaskKind::Instance);
    for (i, shape) in scene.shapes.iter().enumerate() {
        let (x0, y0, x1, y1) = shape.bbox();
        let xa = x0.floor().max(0.0) as i64;
        let xb = (x1.ceil() as i64).min(size as i64 - 1);
        let ya = y0.floor().max(0.0) as i64;
        let yb = (y1.ceil() as i64).min(size as i64 - 1);
        for y in ya..=yb {
            for x in xa..=xb {
                let (x, y) = (x as u32, y as u32);
                if shape.contains(x, y) {
                    img.put_pixel(x, y, Rgb(shape.shade(x, y, spec.texture)));
                    map.set(x, y, i as u32 + 1);
                }
            }
        }
    }
    let present = map.id_set();
    let categories: BTreeMap<u32, u32> = scene
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (i as u32 + 1, s.category))
        .filter(|(id, _)| present.contains(id))
        .collect();
    LabeledSample::new(img, map, categories, tag)
}

pub const SHAPES_TAG: &str = "shapes";

/// One still scene.
pub fn gen_shapes_sample<R: Rng + ?Sized>(spec: &ShapeSpec, rng: &mut R) -> Result<LabeledSample, DataError> {
    gen_shapes_with_layout(spec, rng).map(|(sample, _)| sample)
}

/// Like [`gen_shapes_sample`], also returning the drawn shapes in paint order.
pub fn gen_shapes_with_layout<R: Rng + ?Sized>(spec: &ShapeSpec, rng: &mut R) -> Result<(LabeledSample, Vec<Shape>), DataError> {
    spec.validate()?;
    let scene = draw_scene(spec, rng);
    Ok((render(&scene, spec, SHAPES_TAG), scene.shapes))
}

/// A `frames`-long sequence of the same scene with every shape moving at a
/// constant velocity. Frame 0 equals [`gen_shapes_sample`] for the same seed.
pub fn gen_shapes_sequence<R: Rng + ?Sized>(spec: &ShapeSpec, frames: usize, rng: &mut R) -> Result<VideoSample, DataError> {
    spec.validate()?;
    if frames == 0 {
        return Err(DataError::BadSpec("a sequence needs at least one frame".into()));
    }
    let scene = draw_scene(spec, rng);
    let first = render(&scene, spec, SHAPES_TAG);
    if frames == 1 {
        return Ok(VideoSample { frames: vec![first] });
    }
    let ids = first.map.id_set();
    let steps = (frames - 1) as f32;
    let size = spec.size as f32;

    let try_velocities = |rng: &mut R| -> Vec<(f32, f32)> {
        scene
            .shapes
            .iter()
            .map(|s| {
                let (mut lo_x, mut hi_x) = (-spec.max_speed, spec.max_speed);
                let (mut lo_y, mut hi_y) = (-spec.max_speed, spec.max_speed);
                if !spec.allow_exit {
                    let (x0, y0, x1, y1) = s.bbox();
                    lo_x = lo_x.max(-x0.max(0.0) / steps);
                    hi_x = hi_x.min((size - 1.0 - x1).max(0.0) / steps);
                    lo_y = lo_y.max(-y0.max(0.0) / steps);
                    hi_y = hi_y.min((size - 1.0 - y1).max(0.0) / steps);
                }
                let vx = if hi_x > lo_x { rng.random_range(lo_x..=hi_x) } else { 0.0 };
                let vy = if hi_y > lo_y { rng.random_range(lo_y..=hi_y) } else { 0.0 };
                (vx, vy)
            })
            .collect()
    };

    let build = |vel: &[(f32, f32)]| -> Vec<LabeledSample> {
        let mut out = vec![first.clone()];
        for t in 1..frames {
            let moved = Scene {
                background: scene.background.clone(),
                shapes: scene
                    .shapes
                    .iter()
                    .zip(vel)
                    .map(|(s, &(vx, vy))| s.translated(vx * t as f32, vy * t as f32))
                    .collect(),
            };
            out.push(render(&moved, spec, SHAPES_TAG));
        }
        out
    };

    for _ in 0..16 {
        let vel = try_velocities(rng);
        let out = build(&vel);
        if spec.allow_exit || out.iter().all(|f| f.map.id_set() == ids) {
            return Ok(VideoSample { frames: out });
        }
    }
    let still = vec![(0.0, 0.0); scene.shapes.len()];
    Ok(VideoSample { frames: build(&still) })
}
