use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// MLP hidden width as a multiple of `dim`.
pub const MLP_RATIO: usize = 4;

/// How the learned positional embeddings start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosInit {
    /// Truncated normal σ=0.02, like every other weight.
    #[default]
    TruncNormal,
    /// Fixed 2D sin-cos table over the canvas grid (still trained).
    Sincos,
}

impl std::str::FromStr for PosInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trunc_normal" => Ok(Self::TruncNormal),
            "sincos" => Ok(Self::Sincos),
            _ => Err(format!("expected trunc_normal or sincos, got {s:?}")),
        }
    }
}

impl std::fmt::Display for PosInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TruncNormal => "trunc_normal",
            Self::Sincos => "sincos",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Patch side in pixels.
    pub patch: u32,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Side of the square 2×2 canvas in pixels.
    pub canvas_side: u32,
    pub seed: u64,
    /// Only affects initialization.
    #[serde(default)]
    pub pos_init: PosInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            canvas_side: 128,
            seed: 0,
            pos_init: PosInit::TruncNormal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.patch == 0 || self.canvas_side == 0 {
            return bad("patch and canvas_side must be positive");
        }
        if self.canvas_side % (2 * self.patch) != 0 {
            return bad("canvas_side must split into two quadrants of whole patches");
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return bad("dim must be a positive multiple of heads");
        }
        if self.depth == 0 {
            return bad("depth must be at least 1");
        }
        if self.pos_init == PosInit::Sincos && self.dim % 4 != 0 {
            return bad("sincos positional init needs dim divisible by 4");
        }
        Ok(())
    }

    /// Patches per canvas side.
    pub fn grid(&self) -> usize {
        (self.canvas_side / self.patch) as usize
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per patch (`patch² · 3`).
    pub fn patch_values(&self) -> usize {
        (self.patch * self.patch * 3) as usize
    }

    pub fn image_side(&self) -> u32 {
        self.canvas_side / 2
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * MLP_RATIO
    }

    /// Token indices of the query-target quadrant, row-major.
    pub fn query_target_tokens(&self) -> Vec<usize> {
        let g = self.grid();
        (g / 2..g).flat_map(|y| (g / 2..g).map(move |x| y * g + x)).collect()
    }

    /// Token indices of the bottom (query) row of quadrants.
    pub fn query_row_tokens(&self) -> Range<usize> {
        let g = self.grid();
        (g / 2) * g..g * g
    }

    pub fn is_target_column(&self, token: usize) -> bool {
        token % self.grid() >= self.grid() / 2
    }

    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }
}

/// Name, shape and flat offset of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub norm1_w: Range<usize>,
    pub norm1_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub proj_w: Range<usize>,
    pub proj_b: Range<usize>,
    pub norm2_w: Range<usize>,
    pub norm2_b: Range<usize>,
    pub fc1_w: Range<usize>,
    pub fc1_b: Range<usize>,
    pub fc2_w: Range<usize>,
    pub fc2_b: Range<usize>,
}

/// Flat parameter layout. Every tensor is a contiguous row-major slice of one
/// parameter vector; linear weights are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub patch_w: Range<usize>,
    pub patch_b: Range<usize>,
    pub pos: Range<usize>,
    pub mask_token: Range<usize>,
    pub task_category: Range<usize>,
    pub task_instance: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub norm_w: Range<usize>,
    pub norm_b: Range<usize>,
    pub dec_w: Range<usize>,
    pub dec_b: Range<usize>,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    offset: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize], decay: bool) -> Range<usize> {
        let len: usize = shape.iter().product();
        let range = self.offset..self.offset + len;
        self.offset += len;
        self.tensors.push(TensorInfo {
            name,
            shape: shape.to_vec(),
            range: range.clone(),
            decay,
        });
        range
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        let pv = cfg.patch_values();
        let h = cfg.hidden();
        let mut b = Builder {
            tensors: Vec::new(),
            offset: 0,
        };
        let patch_w = b.push("patch_embed.weight".into(), &[pv, d], true);
        let patch_b = b.push("patch_embed.bias".into(), &[d], false);
        let pos = b.push("pos_embed".into(), &[cfg.tokens(), d], false);
        let mask_token = b.push("mask_token".into(), &[d], false);
        let task_category = b.push("task_embed.category".into(), &[d], false);
        let task_instance = b.push("task_embed.instance".into(), &[d], false);
        let blocks = (0..cfg.depth)
            .map(|l| {
                let p = |s: &str| format!("blocks.{l}.{s}");
                BlockLayout {
                    norm1_w: b.push(p("norm1.weight"), &[d], false),
                    norm1_b: b.push(p("norm1.bias"), &[d], false),
                    qkv_w: b.push(p("attn.qkv.weight"), &[d, 3 * d], true),
                    qkv_b: b.push(p("attn.qkv.bias"), &[3 * d], false),
                    proj_w: b.push(p("attn.proj.weight"), &[d, d], true),
                    proj_b: b.push(p("attn.proj.bias"), &[d], false),
                    norm2_w: b.push(p("norm2.weight"), &[d], false),
                    norm2_b: b.push(p("norm2.bias"), &[d], false),
                    fc1_w: b.push(p("mlp.fc1.weight"), &[d, h], true),
                    fc1_b: b.push(p("mlp.fc1.bias"), &[h], false),
                    fc2_w: b.push(p("mlp.fc2.weight"), &[h, d], true),
                    fc2_b: b.push(p("mlp.fc2.bias"), &[d], false),
                }
            })
            .collect();
        let norm_w = b.push("norm.weight".into(), &[d], false);
        let norm_b = b.push("norm.bias".into(), &[d], false);
        let dec_w = b.push("decoder.weight".into(), &[d, pv], true);
        let dec_b = b.push("decoder.bias".into(), &[pv], false);
        Self {
            patch_w,
            patch_b,
            pos,
            mask_token,
            task_category,
            task_instance,
            blocks,
            norm_w,
            norm_b,
            dec_w,
            dec_b,
            total: b.offset,
            tensors: b.tensors,
        }
    }

    /// Per-parameter weight-decay flags.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for t in &self.tensors {
            if t.decay {
                mask[t.range.clone()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}
