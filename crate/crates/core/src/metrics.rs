//! IoU-family scores, boundary F-measure and sequence J&F.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmap::SegmentMap;

/// Boundary tolerance as a fraction of the image diagonal.
pub const DEFAULT_BOUNDARY_TOL: f64 = 0.008;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((u32, u32), (u32, u32)),
    #[error("sequence lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty class set")]
    EmptyClassSet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub intersection: u64,
    pub union: u64,
    pub gt: u64,
    pub pred: u64,
}

/// Per-class pixel counts; tallies over disjoint tiles merge into the tally
/// of the whole image.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTally {
    pub classes: BTreeMap<u32, ClassCounts>,
}

impl ConfusionTally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &SegmentMap, gt: &SegmentMap) -> Result<(), MetricError> {
        check_shape(pred.dimensions(), gt.dimensions())?;
        self.add_ids(pred.ids(), gt.ids());
        Ok(())
    }

    pub fn add_ids(&mut self, pred: &[u32], gt: &[u32]) {
        for (&p, &g) in pred.iter().zip(gt) {
            let gc = self.classes.entry(g).or_default();
            gc.gt += 1;
            gc.union += 1;
            if p == g {
                gc.intersection += 1;
                gc.pred += 1;
            } else {
                let pc = self.classes.entry(p).or_default();
                pc.pred += 1;
                pc.union += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionTally) {
        for (&c, o) in &other.classes {
            let e = self.classes.entry(c).or_default();
            e.intersection += o.intersection;
            e.union += o.union;
            e.gt += o.gt;
            e.pred += o.pred;
        }
    }

    /// `None` when the class appears in neither prediction nor ground truth.
    pub fn iou(&self, class: u32) -> Option<f64> {
        self.classes
            .get(&class)
            .filter(|c| c.union > 0)
            .map(|c| c.intersection as f64 / c.union as f64)
    }

    /// Mean IoU over `classes`, skipping classes absent from both sides.
    /// A set with no present class scores 1.
    pub fn miou(&self, classes: &BTreeSet<u32>) -> Result<f64, MetricError> {
        if classes.is_empty() {
            return Err(MetricError::EmptyClassSet);
        }
        let ious: Vec<f64> = classes.iter().filter_map(|&c| self.iou(c)).collect();
        Ok(if ious.is_empty() {
            1.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        })
    }

    pub fn per_class(&self) -> BTreeMap<u32, f64> {
        self.classes.keys().filter_map(|&c| self.iou(c).map(|v| (c, v))).collect()
    }
}

fn check_shape(a: (u32, u32), b: (u32, u32)) -> Result<(), MetricError> {
    if a != b {
        return Err(MetricError::ShapeMismatch(a, b));
    }
    Ok(())
}

pub fn miou(preds: &[SegmentMap], gts: &[SegmentMap], classes: &BTreeSet<u32>) -> Result<f64, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::LengthMismatch(preds.len(), gts.len()));
    }
    let mut t = ConfusionTally::new();
    for (p, g) in preds.iter().zip(gts) {
        t.add(p, g)?;
    }
    t.miou(classes)
}

/// Binary mask in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), (width * height) as usize);
        Self { width, height, bits }
    }

    pub fn of_id(map: &SegmentMap, id: u32) -> Self {
        Self::new(map.width(), map.height(), map.mask_of(id))
    }

    /// Every nonzero pixel.
    pub fn foreground(map: &SegmentMap) -> Self {
        Self::new(map.width(), map.height(), map.ids().iter().map(|&v| v != 0).collect())
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn at(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64 && self.bits[(y * self.width as i64 + x) as usize]
    }

    /// Mask pixels with at least one 4-neighbour outside the mask (pixels
    /// beyond the border count as outside): the mask XOR its 1-px erosion.
    pub fn boundary(&self) -> Mask {
        let mut out = vec![false; self.bits.len()];
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                if self.at(x, y) {
                    let interior = self.at(x - 1, y) && self.at(x + 1, y) && self.at(x, y - 1) && self.at(x, y + 1);
                    out[(y * self.width as i64 + x) as usize] = !interior;
                }
            }
        }
        Mask::new(self.width, self.height, out)
    }
}

/// IoU of two binary masks; two empty masks score 1.
pub fn mask_iou(pred: &Mask, gt: &Mask) -> Result<f64, MetricError> {
    check_shape(pred.dimensions(), gt.dimensions())?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean of foreground IoU and background IoU.
pub fn fb_iou(pred: &Mask, gt: &Mask) -> Result<f64, MetricError> {
    let fg = mask_iou(pred, gt)?;
    let inv = |m: &Mask| Mask::new(m.width, m.height, m.bits.iter().map(|&b| !b).collect());
    let bg = mask_iou(&inv(pred), &inv(gt))?;
    Ok((fg + bg) / 2.0)
}

/// Foreground/background tallies accumulated over many binary episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FbTally {
    pub fg_inter: u64,
    pub fg_union: u64,
    pub bg_inter: u64,
    pub bg_union: u64,
}

impl FbTally {
    pub fn add(&mut self, pred: &Mask, gt: &Mask) -> Result<(), MetricError> {
        check_shape(pred.dimensions(), gt.dimensions())?;
        for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
            self.fg_inter += (p && g) as u64;
            self.fg_union += (p || g) as u64;
            self.bg_inter += (!p && !g) as u64;
            self.bg_union += (!p || !g) as u64;
        }
        Ok(())
    }

    pub fn fb_iou(&self) -> f64 {
        let r = |i: u64, u: u64| if u == 0 { 1.0 } else { i as f64 / u as f64 };
        (r(self.fg_inter, self.fg_union) + r(self.bg_inter, self.bg_union)) / 2.0
    }
}

/// Squared Euclidean distance to the nearest set pixel, exact, separable
/// two-pass lower-envelope transform. Unreachable pixels get `f64::INFINITY`.
pub fn squared_distance_transform(mask: &Mask) -> Vec<f64> {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let big = 1e20;
    let mut grid: Vec<f64> = mask.bits.iter().map(|&b| if b { 0.0 } else { big }).collect();
    let mut f = Vec::new();
    let mut d = Vec::new();
    for x in 0..w {
        f.clear();
        f.extend((0..h).map(|y| grid[y * w + x]));
        edt_1d(&f, &mut d);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f.clear();
        f.extend_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f, &mut d);
        grid[y * w..(y + 1) * w].copy_from_slice(&d);
    }
    grid.iter().map(|&v| if v >= big / 2.0 { f64::INFINITY } else { v }).collect()
}

fn edt_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] = −∞, so k never underflows
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        out[q] = dq * dq + f[p];
    }
}

fn matched_fraction(from: &Mask, to_dist2: &[f64], tol_px: f64) -> (usize, usize) {
    let lim = tol_px * tol_px;
    let total = from.count();
    let hit = from.bits.iter().zip(to_dist2).filter(|(&b, &d)| b && d <= lim).count();
    (hit, total)
}

/// Boundary F-measure. Boundary pixels of one mask count as matched when an
/// opposite boundary pixel lies within `tol · diagonal`. Two masks without
/// boundary score 1; exactly one without boundary scores 0.
pub fn boundary_f(pred: &Mask, gt: &Mask, tol: f64) -> Result<f64, MetricError> {
    check_shape(pred.dimensions(), gt.dimensions())?;
    let tol_px = tol * ((pred.width as f64).powi(2) + (pred.height as f64).powi(2)).sqrt();
    let pb = pred.boundary();
    let gb = gt.boundary();
    let (np, ng) = (pb.count(), gb.count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let (hp, _) = matched_fraction(&pb, &squared_distance_transform(&gb), tol_px);
    let (hg, _) = matched_fraction(&gb, &squared_distance_transform(&pb), tol_px);
    let precision = hp as f64 / np as f64;
    let recall = hg as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JfScore {
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

/// Per-frame J and F for every object of the sequence (frame 0 excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScores {
    pub frame: usize,
    pub j: f64,
    pub f: f64,
}

/// Sequence J, F and J&F. Objects are the nonzero ids of the ground truth
/// over the whole sequence; each (frame ≥ 1, object) pair contributes
/// equally. A sequence with nothing to score yields 1 everywhere.
pub fn jf_score(preds: &[SegmentMap], gts: &[SegmentMap]) -> Result<(JfScore, Vec<FrameScores>), MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::LengthMismatch(preds.len(), gts.len()));
    }
    let objects: BTreeSet<u32> = gts.iter().flat_map(|g| g.id_set()).collect();
    let (mut js, mut fs) = (Vec::new(), Vec::new());
    let mut frames = Vec::new();
    for t in 1..preds.len() {
        check_shape(preds[t].dimensions(), gts[t].dimensions())?;
        let (mut fj, mut ff) = (0.0, 0.0);
        for &o in &objects {
            let p = Mask::of_id(&preds[t], o);
            let g = Mask::of_id(&gts[t], o);
            let j = mask_iou(&p, &g)?;
            let f = boundary_f(&p, &g, DEFAULT_BOUNDARY_TOL)?;
            js.push(j);
            fs.push(f);
            fj += j;
            ff += f;
        }
        if !objects.is_empty() {
            let n = objects.len() as f64;
            frames.push(FrameScores {
                frame: t,
                j: fj / n,
                f: ff / n,
            });
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            1.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (j, f) = (mean(&js), mean(&fs));
    Ok((JfScore { j, f, jf: (j + f) / 2.0 }, frames))
}
