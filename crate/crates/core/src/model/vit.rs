//! Pre-norm ViT encoder over the whole canvas with a per-patch linear pixel
//! decoder on the query-target quadrant. Forward and backward are written
//! out by hand over flat row-major buffers.

use std::ops::Range;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, ParamLayout, PosInit};
use super::ops::{add_bias, bias_grad, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows, softmax_rows_backward, LnCache};
use super::real::{gemm, Real, Strided};
use super::ModelError;
use crate::palette::Canvas;
use crate::parallel;
use crate::segmap::TaskKind;

/// `[g*g, d]` table: the first half of each row encodes the column, the
/// second half the row, each as sines then cosines over geometric frequencies.
fn sincos_table<T: Real>(g: usize, d: usize) -> Vec<T> {
    let q = d / 4;
    let mut out = Vec::with_capacity(g * g * d);
    for tok in 0..g * g {
        for coord in [tok % g, tok / g] {
            let freqs = (0..q).map(|i| coord as f64 / 10000f64.powf(i as f64 / q as f64));
            let freqs: Vec<f64> = freqs.collect();
            out.extend(freqs.iter().map(|a| T::lit(a.sin())));
            out.extend(freqs.iter().map(|a| T::lit(a.cos())));
        }
    }
    out
}

/// Fixed per-channel normalization: `x = (v/255 − 0.5) / 0.5`.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

#[inline]
pub fn normalize_u8<T: Real>(v: u8) -> T {
    T::lit((v as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD)
}

#[inline]
pub fn denormalize<T: Real>(x: T) -> u8 {
    ((x.as_f64() * PIXEL_STD + PIXEL_MEAN) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Normalized canvas pixels plus the per-token mask plan.
#[derive(Clone, Debug, PartialEq)]
pub struct CanvasInput<T> {
    /// `side × side × 3`, row-major.
    pub pixels: Vec<T>,
    pub mask: Vec<bool>,
}

impl<T: Real> CanvasInput<T> {
    pub fn from_canvas(canvas: &Canvas, cfg: &ModelConfig) -> Result<Self, ModelError> {
        let side = cfg.canvas_side;
        if canvas.pixels.dimensions() != (side, side) || canvas.patch != cfg.patch || canvas.mask.len() != cfg.tokens() {
            return Err(ModelError::GeometryMismatch(format!(
                "canvas {:?} with patch {} does not match model canvas {side} / patch {}",
                canvas.pixels.dimensions(),
                canvas.patch,
                cfg.patch
            )));
        }
        Ok(Self {
            pixels: canvas.pixels.as_raw().iter().map(|&v| normalize_u8(v)).collect(),
            mask: canvas.mask.clone(),
        })
    }

    /// Normalized values of the query-target patches in decoder layout.
    pub fn query_target_values(&self, cfg: &ModelConfig) -> Vec<T> {
        let qt = cfg.query_target_tokens();
        let pv = cfg.patch_values();
        let mut out = vec![T::zero(); qt.len() * pv];
        for (row, &tok) in qt.iter().enumerate() {
            gather_patch(&self.pixels, cfg, tok, &mut out[row * pv..(row + 1) * pv]);
        }
        out
    }
}

fn gather_patch<T: Real>(pixels: &[T], cfg: &ModelConfig, token: usize, out: &mut [T]) {
    let g = cfg.grid();
    let p = cfg.patch as usize;
    let side = cfg.canvas_side as usize;
    let (gx, gy) = (token % g, token / g);
    for py in 0..p {
        let src = ((gy * p + py) * side + gx * p) * 3;
        out[py * p * 3..(py + 1) * p * 3].copy_from_slice(&pixels[src..src + p * 3]);
    }
}

fn scatter_patch_add<T: Real>(pixels: &mut [T], cfg: &ModelConfig, token: usize, vals: &[T]) {
    let g = cfg.grid();
    let p = cfg.patch as usize;
    let side = cfg.canvas_side as usize;
    let (gx, gy) = (token % g, token / g);
    for py in 0..p {
        let dst = ((gy * p + py) * side + gx * p) * 3;
        for (d, &v) in pixels[dst..dst + p * 3].iter_mut().zip(&vals[py * p * 3..(py + 1) * p * 3]) {
            *d += v;
        }
    }
}

/// Decoder output (normalized, query-target patches) as an image quadrant.
pub fn decoded_to_image<T: Real>(values: &[T], cfg: &ModelConfig) -> RgbImage {
    let side = cfg.image_side();
    let p = cfg.patch;
    let half = cfg.grid() as u32 / 2;
    let pv = cfg.patch_values();
    RgbImage::from_fn(side, side, |x, y| {
        let row = ((y / p) * half + x / p) as usize;
        let off = row * pv + (((y % p) * p + x % p) * 3) as usize;
        Rgb([denormalize(values[off]), denormalize(values[off + 1]), denormalize(values[off + 2])])
    })
}

/// Decoder output as pixel values in `[0, 255]` without rounding, laid out
/// like an RGB image of the query-target quadrant.
pub fn decoded_to_pixels<T: Real>(values: &[T], cfg: &ModelConfig) -> Vec<f64> {
    let side = cfg.image_side() as usize;
    let p = cfg.patch as usize;
    let half = cfg.grid() / 2;
    let pv = cfg.patch_values();
    let mut out = vec![0.0; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let row = (y / p) * half + x / p;
            let off = row * pv + ((y % p) * p + x % p) * 3;
            for c in 0..3 {
                out[(y * side + x) * 3 + c] = (values[off + c].as_f64() * PIXEL_STD + PIXEL_MEAN) * 255.0;
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
struct BlockCache<T> {
    ln1: LnCache<T>,
    a1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: LnCache<T>,
    a2: Vec<T>,
    h1: Vec<T>,
    g: Vec<T>,
}

/// Activations kept from a training forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace<T> {
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    f_qt: Vec<T>,
}

/// Per-layer query-row activations recorded after each (averaged) attention
/// sublayer during a feature-ensemble forward.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace<T> {
    /// `layers[l]` is `query_rows × dim`.
    pub layers: Vec<Vec<T>>,
}

/// How the feature-ensemble forward treats the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EnsembleHook {
    /// Replace query-row features by their mean across canvases after every
    /// attention sublayer.
    pub average_query: bool,
    /// Keep a [`ForwardTrace`].
    pub record: bool,
}

/// Which gradients [`ModelState::backward`] produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradRequest {
    pub params: bool,
    pub input: bool,
}

pub struct Gradients<T> {
    /// Same layout as the parameter vector; empty when not requested.
    pub params: Vec<T>,
    /// Same layout as [`CanvasInput::pixels`]; empty when not requested.
    pub input: Vec<T>,
}

/// Transformer weights with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Real = f32> {
    config: ModelConfig,
    layout: Arc<ParamLayout>,
    params: Vec<T>,
}

fn pair_mut<T>(v: &mut [T], a: Range<usize>, b: Range<usize>) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start);
    let (lo, hi) = v.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

impl<T: Real> ModelState<T> {
    /// Weights from a truncated normal (σ = 0.02, cut at 2σ), zero biases and
    /// unit norm gains, drawn from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        Self::init_with(config, &mut crate::rng::seeded(config.seed))
    }

    pub fn init_with<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut params = vec![T::zero(); layout.total];
        for t in &layout.tensors {
            let is_gain = t.name.ends_with("norm1.weight") || t.name.ends_with("norm2.weight") || t.name == "norm.weight";
            let is_bias = t.name.ends_with(".bias");
            for v in &mut params[t.range.clone()] {
                *v = if is_gain {
                    T::one()
                } else if is_bias {
                    T::zero()
                } else {
                    let mut x: f64 = normal.sample(rng);
                    while x.abs() > 0.04 {
                        x = normal.sample(rng);
                    }
                    T::lit(x)
                };
            }
        }
        if config.pos_init == PosInit::Sincos {
            let (g, d) = (config.grid(), config.dim);
            params[layout.pos.clone()].copy_from_slice(&sincos_table(g, d));
        }
        Ok(Self {
            config,
            layout: Arc::new(layout),
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::BadConfig(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self {
            config,
            layout: Arc::new(layout),
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config,
            layout: Arc::clone(&self.layout),
            params: self.params.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Hex SHA-256 over the configuration and every parameter's bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for v in &self.params {
            h.update(v.as_f64().to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    fn p(&self, r: &Range<usize>) -> &[T] {
        &self.params[r.clone()]
    }

    fn task_embedding(&self, kind: TaskKind) -> &[T] {
        match kind {
            TaskKind::Category => self.p(&self.layout.task_category),
            TaskKind::Instance => self.p(&self.layout.task_instance),
        }
    }

    fn check_input(&self, input: &CanvasInput<T>) -> Result<(), ModelError> {
        let side = self.config.canvas_side as usize;
        if input.pixels.len() != side * side * 3 || input.mask.len() != self.config.tokens() {
            return Err(ModelError::GeometryMismatch(format!(
                "input has {} values / {} mask entries, model expects {} / {}",
                input.pixels.len(),
                input.mask.len(),
                side * side * 3,
                self.config.tokens()
            )));
        }
        Ok(())
    }

    /// Patch embedding, mask-token substitution, positional and task
    /// embeddings. Returns `(tokens × dim, tokens × patch_values)`.
    fn embed(&self, input: &CanvasInput<T>, kind: TaskKind) -> (Vec<T>, Vec<T>) {
        let cfg = &self.config;
        let (n, d, pv) = (cfg.tokens(), cfg.dim, cfg.patch_values());
        let mut patches = vec![T::zero(); n * pv];
        for t in 0..n {
            gather_patch(&input.pixels, cfg, t, &mut patches[t * pv..(t + 1) * pv]);
        }
        let mut x = vec![T::zero(); n * d];
        let l = &self.layout;
        gemm(
            T::one(),
            &patches,
            Strided::dense(n, pv),
            self.p(&l.patch_w),
            Strided::dense(pv, d),
            T::zero(),
            &mut x,
            Strided::dense(n, d),
        );
        add_bias(&mut x, self.p(&l.patch_b));
        let mask_token = self.p(&l.mask_token);
        let pos = self.p(&l.pos);
        let task = self.task_embedding(kind);
        for t in 0..n {
            let row = &mut x[t * d..(t + 1) * d];
            if input.mask[t] {
                row.copy_from_slice(mask_token);
            }
            for i in 0..d {
                row[i] += pos[t * d + i];
            }
            if cfg.is_target_column(t) {
                for i in 0..d {
                    row[i] += task[i];
                }
            }
        }
        (x, patches)
    }

    fn attn_sublayer(&self, l: usize, x: &mut [T], cache: Option<&mut BlockCache<T>>) {
        let cfg = &self.config;
        let (n, d, heads, dh) = (cfg.tokens(), cfg.dim, cfg.heads, cfg.head_dim());
        let b = &self.layout.blocks[l];
        let mut local = BlockCache::default();
        let c = cache.unwrap_or(&mut local);
        c.a1.resize(n * d, T::zero());
        layer_norm(x, self.p(&b.norm1_w), self.p(&b.norm1_b), d, &mut c.a1, Some(&mut c.ln1));
        c.qkv.resize(n * 3 * d, T::zero());
        gemm(
            T::one(),
            &c.a1,
            Strided::dense(n, d),
            self.p(&b.qkv_w),
            Strided::dense(d, 3 * d),
            T::zero(),
            &mut c.qkv,
            Strided::dense(n, 3 * d),
        );
        add_bias(&mut c.qkv, self.p(&b.qkv_b));
        c.probs.resize(heads * n * n, T::zero());
        c.attn.resize(n * d, T::zero());
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let qv = Strided::rows_of(n, dh, 3 * d);
        for h in 0..heads {
            let probs = &mut c.probs[h * n * n..(h + 1) * n * n];
            gemm(
                scale,
                &c.qkv[h * dh..],
                qv,
                &c.qkv[d + h * dh..],
                qv.t(),
                T::zero(),
                probs,
                Strided::dense(n, n),
            );
            softmax_rows(probs, n);
            gemm(
                T::one(),
                probs,
                Strided::dense(n, n),
                &c.qkv[2 * d + h * dh..],
                qv,
                T::zero(),
                &mut c.attn[h * dh..],
                Strided::rows_of(n, dh, d),
            );
        }
        gemm(
            T::one(),
            &c.attn,
            Strided::dense(n, d),
            self.p(&b.proj_w),
            Strided::dense(d, d),
            T::one(),
            x,
            Strided::dense(n, d),
        );
        add_bias(x, self.p(&b.proj_b));
    }

    fn mlp_sublayer(&self, l: usize, x: &mut [T], cache: Option<&mut BlockCache<T>>) {
        let cfg = &self.config;
        let (n, d, hid) = (cfg.tokens(), cfg.dim, cfg.hidden());
        let b = &self.layout.blocks[l];
        let mut local = BlockCache::default();
        let c = cache.unwrap_or(&mut local);
        c.a2.resize(n * d, T::zero());
        layer_norm(x, self.p(&b.norm2_w), self.p(&b.norm2_b), d, &mut c.a2, Some(&mut c.ln2));
        c.h1.resize(n * hid, T::zero());
        gemm(
            T::one(),
            &c.a2,
            Strided::dense(n, d),
            self.p(&b.fc1_w),
            Strided::dense(d, hid),
            T::zero(),
            &mut c.h1,
            Strided::dense(n, hid),
        );
        add_bias(&mut c.h1, self.p(&b.fc1_b));
        c.g.clear();
        c.g.extend(c.h1.iter().map(|&v| gelu(v)));
        gemm(
            T::one(),
            &c.g,
            Strided::dense(n, hid),
            self.p(&b.fc2_w),
            Strided::dense(hid, d),
            T::one(),
            x,
            Strided::dense(n, d),
        );
        add_bias(x, self.p(&b.fc2_b));
    }

    /// Final norm and decoder on the query-target tokens.
    fn head(&self, x: &[T], lnf: Option<&mut LnCache<T>>, f_keep: Option<&mut Vec<T>>) -> Vec<T> {
        let cfg = &self.config;
        let (d, pv) = (cfg.dim, cfg.patch_values());
        let qt = cfg.query_target_tokens();
        let mut rows = Vec::with_capacity(qt.len() * d);
        for &t in &qt {
            rows.extend_from_slice(&x[t * d..(t + 1) * d]);
        }
        let mut f = vec![T::zero(); rows.len()];
        layer_norm(&rows, self.p(&self.layout.norm_w), self.p(&self.layout.norm_b), d, &mut f, lnf);
        let mut out = vec![T::zero(); qt.len() * pv];
        gemm(
            T::one(),
            &f,
            Strided::dense(qt.len(), d),
            self.p(&self.layout.dec_w),
            Strided::dense(d, pv),
            T::zero(),
            &mut out,
            Strided::dense(qt.len(), pv),
        );
        add_bias(&mut out, self.p(&self.layout.dec_b));
        if let Some(keep) = f_keep {
            *keep = f;
        }
        out
    }

    /// Predicted values for every query-target patch (`P × patch_values`,
    /// normalized pixel scale).
    pub fn forward(&self, input: &CanvasInput<T>, kind: TaskKind) -> Result<Vec<T>, ModelError> {
        self.check_input(input)?;
        let (mut x, _) = self.embed(input, kind);
        for l in 0..self.config.depth {
            self.attn_sublayer(l, &mut x, None);
            self.mlp_sublayer(l, &mut x, None);
        }
        Ok(self.head(&x, None, None))
    }

    /// Forward over a batch of canvases in lockstep. With
    /// `hook.average_query`, after each attention sublayer the query-row
    /// features of every canvas are replaced by their mean across the batch.
    pub fn forward_ensemble(
        &self,
        inputs: &[CanvasInput<T>],
        kind: TaskKind,
        hook: EnsembleHook,
    ) -> Result<(Vec<Vec<T>>, Option<ForwardTrace<T>>), ModelError> {
        for input in inputs {
            self.check_input(input)?;
        }
        let d = self.config.dim;
        let rows = self.config.query_row_tokens();
        let mut xs: Vec<Vec<T>> = parallel::map(inputs, |inp| self.embed(inp, kind).0);
        let mut trace = hook.record.then(ForwardTrace::default);
        for l in 0..self.config.depth {
            parallel::for_each_mut(&mut xs, |x| self.attn_sublayer(l, x, None));
            if hook.average_query && xs.len() > 1 {
                average_rows(&mut xs, rows.start * d..rows.end * d);
            }
            if let Some(tr) = trace.as_mut() {
                tr.layers.push(xs[0][rows.start * d..rows.end * d].to_vec());
            }
            parallel::for_each_mut(&mut xs, |x| self.mlp_sublayer(l, x, None));
        }
        let outs = parallel::map(&xs, |x| self.head(x, None, None));
        Ok((outs, trace))
    }

    /// Forward pass keeping every activation needed by [`Self::backward`].
    pub fn forward_train(&self, input: &CanvasInput<T>, kind: TaskKind) -> Result<(Vec<T>, Trace<T>), ModelError> {
        self.check_input(input)?;
        let (mut x, patches) = self.embed(input, kind);
        let mut trace = Trace {
            patches,
            blocks: vec![BlockCache::default(); self.config.depth],
            ..Default::default()
        };
        for l in 0..self.config.depth {
            self.attn_sublayer(l, &mut x, Some(&mut trace.blocks[l]));
            self.mlp_sublayer(l, &mut x, Some(&mut trace.blocks[l]));
        }
        let out = self.head(&x, Some(&mut trace.lnf), Some(&mut trace.f_qt));
        Ok((out, trace))
    }

    /// Back-propagates `d_out` (gradient w.r.t. the decoder output).
    pub fn backward(&self, input: &CanvasInput<T>, kind: TaskKind, trace: &Trace<T>, d_out: &[T], want: GradRequest) -> Gradients<T> {
        let cfg = &self.config;
        let (n, d, pv, hid, heads, dh) = (cfg.tokens(), cfg.dim, cfg.patch_values(), cfg.hidden(), cfg.heads, cfg.head_dim());
        let l = &*self.layout;
        let qt = cfg.query_target_tokens();
        let nq = qt.len();
        let mut g = if want.params { vec![T::zero(); l.total] } else { Vec::new() };

        // decoder
        if want.params {
            gemm(
                T::one(),
                &trace.f_qt,
                Strided::dense(nq, d).t(),
                d_out,
                Strided::dense(nq, pv),
                T::one(),
                &mut g[l.dec_w.clone()],
                Strided::dense(d, pv),
            );
            bias_grad(d_out, &mut g[l.dec_b.clone()]);
        }
        let mut df = vec![T::zero(); nq * d];
        gemm(
            T::one(),
            d_out,
            Strided::dense(nq, pv),
            self.p(&l.dec_w),
            Strided::dense(d, pv).t(),
            T::zero(),
            &mut df,
            Strided::dense(nq, d),
        );
        let mut dxq = vec![T::zero(); nq * d];
        {
            let (mut sg, mut sb) = (vec![T::zero(); d], vec![T::zero(); d]);
            layer_norm_backward(&df, &trace.lnf, self.p(&l.norm_w), d, &mut sg, &mut sb, &mut dxq);
            if want.params {
                accumulate(&mut g[l.norm_w.clone()], &sg);
                accumulate(&mut g[l.norm_b.clone()], &sb);
            }
        }
        let mut dx = vec![T::zero(); n * d];
        for (row, &t) in qt.iter().enumerate() {
            dx[t * d..(t + 1) * d].copy_from_slice(&dxq[row * d..(row + 1) * d]);
        }

        let mut tmp_nd = vec![T::zero(); n * d];
        let mut dh1 = vec![T::zero(); n * hid];
        let mut dqkv = vec![T::zero(); n * 3 * d];
        let mut dattn = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n * n];
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let qv = Strided::rows_of(n, dh, 3 * d);

        for li in (0..cfg.depth).rev() {
            let b = &l.blocks[li];
            let c = &trace.blocks[li];

            // MLP: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
            if want.params {
                gemm(
                    T::one(),
                    &c.g,
                    Strided::dense(n, hid).t(),
                    &dx,
                    Strided::dense(n, d),
                    T::one(),
                    &mut g[b.fc2_w.clone()],
                    Strided::dense(hid, d),
                );
                bias_grad(&dx, &mut g[b.fc2_b.clone()]);
            }
            gemm(
                T::one(),
                &dx,
                Strided::dense(n, d),
                self.p(&b.fc2_w),
                Strided::dense(hid, d).t(),
                T::zero(),
                &mut dh1,
                Strided::dense(n, hid),
            );
            for (dv, &hv) in dh1.iter_mut().zip(&c.h1) {
                *dv = *dv * gelu_grad(hv);
            }
            if want.params {
                gemm(
                    T::one(),
                    &c.a2,
                    Strided::dense(n, d).t(),
                    &dh1,
                    Strided::dense(n, hid),
                    T::one(),
                    &mut g[b.fc1_w.clone()],
                    Strided::dense(d, hid),
                );
                bias_grad(&dh1, &mut g[b.fc1_b.clone()]);
            }
            gemm(
                T::one(),
                &dh1,
                Strided::dense(n, hid),
                self.p(&b.fc1_w),
                Strided::dense(d, hid).t(),
                T::zero(),
                &mut tmp_nd,
                Strided::dense(n, d),
            );
            {
                let mut dln = vec![T::zero(); n * d];
                let (mut sg, mut sb) = (vec![T::zero(); d], vec![T::zero(); d]);
                layer_norm_backward(&tmp_nd, &c.ln2, self.p(&b.norm2_w), d, &mut sg, &mut sb, &mut dln);
                accumulate(&mut dx, &dln);
                if want.params {
                    let (gw, gb) = pair_mut(&mut g, b.norm2_w.clone(), b.norm2_b.clone());
                    accumulate(gw, &sg);
                    accumulate(gb, &sb);
                }
            }

            // attention: x_mid = x_in + proj(attn(ln1(x_in)))
            if want.params {
                gemm(
                    T::one(),
                    &c.attn,
                    Strided::dense(n, d).t(),
                    &dx,
                    Strided::dense(n, d),
                    T::one(),
                    &mut g[b.proj_w.clone()],
                    Strided::dense(d, d),
                );
                bias_grad(&dx, &mut g[b.proj_b.clone()]);
            }
            gemm(
                T::one(),
                &dx,
                Strided::dense(n, d),
                self.p(&b.proj_w),
                Strided::dense(d, d).t(),
                T::zero(),
                &mut dattn,
                Strided::dense(n, d),
            );
            for h in 0..heads {
                let probs = &c.probs[h * n * n..(h + 1) * n * n];
                let d_o = &dattn[h * dh..];
                let ov = Strided::rows_of(n, dh, d);
                // dP = dO · Vᵀ
                gemm(
                    T::one(),
                    d_o,
                    ov,
                    &c.qkv[2 * d + h * dh..],
                    qv.t(),
                    T::zero(),
                    &mut dp,
                    Strided::dense(n, n),
                );
                // dV = Pᵀ · dO
                gemm(
                    T::one(),
                    probs,
                    Strided::dense(n, n).t(),
                    d_o,
                    ov,
                    T::zero(),
                    &mut dqkv[2 * d + h * dh..],
                    qv,
                );
                softmax_rows_backward(probs, &mut dp, n);
                // dQ = s · dS · K,  dK = s · dSᵀ · Q
                gemm(
                    scale,
                    &dp,
                    Strided::dense(n, n),
                    &c.qkv[d + h * dh..],
                    qv,
                    T::zero(),
                    &mut dqkv[h * dh..],
                    qv,
                );
                gemm(
                    scale,
                    &dp,
                    Strided::dense(n, n).t(),
                    &c.qkv[h * dh..],
                    qv,
                    T::zero(),
                    &mut dqkv[d + h * dh..],
                    qv,
                );
            }
            if want.params {
                gemm(
                    T::one(),
                    &c.a1,
                    Strided::dense(n, d).t(),
                    &dqkv,
                    Strided::dense(n, 3 * d),
                    T::one(),
                    &mut g[b.qkv_w.clone()],
                    Strided::dense(d, 3 * d),
                );
                bias_grad(&dqkv, &mut g[b.qkv_b.clone()]);
            }
            gemm(
                T::one(),
                &dqkv,
                Strided::dense(n, 3 * d),
                self.p(&b.qkv_w),
                Strided::dense(d, 3 * d).t(),
                T::zero(),
                &mut tmp_nd,
                Strided::dense(n, d),
            );
            {
                let mut dln = vec![T::zero(); n * d];
                let (mut sg, mut sb) = (vec![T::zero(); d], vec![T::zero(); d]);
                layer_norm_backward(&tmp_nd, &c.ln1, self.p(&b.norm1_w), d, &mut sg, &mut sb, &mut dln);
                accumulate(&mut dx, &dln);
                if want.params {
                    let (gw, gb) = pair_mut(&mut g, b.norm1_w.clone(), b.norm1_b.clone());
                    accumulate(gw, &sg);
                    accumulate(gb, &sb);
                }
            }
        }

        // embedding
        let mut demb = dx.clone();
        for t in 0..n {
            if input.mask[t] {
                demb[t * d..(t + 1) * d].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        if want.params {
            accumulate(&mut g[l.pos.clone()], &dx);
            let task = match kind {
                TaskKind::Category => l.task_category.clone(),
                TaskKind::Instance => l.task_instance.clone(),
            };
            for t in 0..n {
                let row = &dx[t * d..(t + 1) * d];
                if input.mask[t] {
                    accumulate(&mut g[l.mask_token.clone()], row);
                }
                if cfg.is_target_column(t) {
                    accumulate(&mut g[task.clone()], row);
                }
            }
            gemm(
                T::one(),
                &trace.patches,
                Strided::dense(n, pv).t(),
                &demb,
                Strided::dense(n, d),
                T::one(),
                &mut g[l.patch_w.clone()],
                Strided::dense(pv, d),
            );
            bias_grad(&demb, &mut g[l.patch_b.clone()]);
        }
        let input_grad = if want.input {
            let mut dpatches = vec![T::zero(); n * pv];
            gemm(
                T::one(),
                &demb,
                Strided::dense(n, d),
                self.p(&l.patch_w),
                Strided::dense(pv, d).t(),
                T::zero(),
                &mut dpatches,
                Strided::dense(n, pv),
            );
            let mut dpix = vec![T::zero(); input.pixels.len()];
            for t in 0..n {
                if !input.mask[t] {
                    scatter_patch_add(&mut dpix, cfg, t, &dpatches[t * pv..(t + 1) * pv]);
                }
            }
            dpix
        } else {
            Vec::new()
        };
        Gradients {
            params: g,
            input: input_grad,
        }
    }

    /// Attention probabilities of every layer and head for one canvas
    /// (`depth × heads × tokens × tokens`).
    pub fn attention_maps(&self, input: &CanvasInput<T>, kind: TaskKind) -> Result<Vec<T>, ModelError> {
        let (_, trace) = self.forward_train(input, kind)?;
        Ok(trace.blocks.into_iter().flat_map(|b| b.probs).collect())
    }
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Replaces `range` of every buffer by the elementwise mean across buffers.
/// Values are summed in sorted order so the result does not depend on the
/// order of the buffers; when all buffers agree the value is kept as is.
fn average_rows<T: Real>(xs: &mut [Vec<T>], range: Range<usize>) {
    let b = xs.len();
    let inv = T::one() / T::lit(b as f64);
    let mut vals = vec![T::zero(); b];
    for i in range {
        for (k, x) in xs.iter().enumerate() {
            vals[k] = x[i];
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let mean = if vals[0] == vals[b - 1] {
            vals[0]
        } else {
            vals.iter().copied().fold(T::zero(), |acc, v| acc + v) * inv
        };
        for x in xs.iter_mut() {
            x[i] = mean;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny() -> ModelConfig {
        ModelConfig {
            patch: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            canvas_side: 16,
            seed: 3,
            ..Default::default()
        }
    }

    fn random_input<T: Real>(cfg: &ModelConfig, seed: u64) -> CanvasInput<T> {
        let mut rng = seeded(seed);
        let side = cfg.canvas_side as usize;
        let pixels = (0..side * side * 3).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
        let mut mask = vec![false; cfg.tokens()];
        for (i, &t) in cfg.query_target_tokens().iter().enumerate() {
            mask[t] = i % 3 != 0;
        }
        CanvasInput { pixels, mask }
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = ModelState::<f32>::init(tiny()).unwrap();
        let b = ModelState::<f32>::init(tiny()).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.all_finite());
        assert_eq!(a.checksum(), b.checksum());
        let c = ModelState::<f32>::init(ModelConfig { seed: 4, ..tiny() }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_respects_truncation_and_zero_bias() {
        let m = ModelState::<f64>::init(ModelConfig::default()).unwrap();
        let l = m.layout();
        assert!(m.params()[l.dec_b.clone()].iter().all(|&v| v == 0.0));
        assert!(m.params()[l.patch_w.clone()].iter().all(|&v| v.abs() <= 0.04));
        assert!(m.params()[l.norm_w.clone()].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sincos_init_only_replaces_positions() {
        let cfg = ModelConfig {
            pos_init: PosInit::Sincos,
            ..tiny()
        };
        let plain = ModelState::<f64>::init(tiny()).unwrap();
        let m = ModelState::<f64>::init(cfg).unwrap();
        let l = m.layout();
        let (g, d) = (cfg.grid(), cfg.dim);
        let pos = &m.params()[l.pos.clone()];
        // token (x=1, y=2): x block then y block, each sines then cosines
        let row = &pos[(2 * g + 1) * d..(2 * g + 2) * d];
        assert_eq!(row[0], 1f64.sin());
        assert_eq!(row[2], 1f64.cos());
        assert_eq!(row[4], 2f64.sin());
        assert_eq!(row[1], (1.0 / 100.0f64).sin());
        assert!(pos[..d]
            .chunks(d / 4)
            .enumerate()
            .all(|(i, c)| c.iter().all(|&v| v == (i % 2) as f64)));
        for (i, (a, b)) in plain.params().iter().zip(m.params()).enumerate() {
            if !l.pos.contains(&i) {
                assert_eq!(a, b, "param {i}");
            }
        }
        assert!(ModelConfig { dim: 6, heads: 2, ..cfg }.validate().is_err());
    }

    #[test]
    fn output_covers_query_target_quadrant() {
        let cfg = tiny();
        let m = ModelState::<f32>::init(cfg).unwrap();
        let out = m.forward(&random_input(&cfg, 1), TaskKind::Category).unwrap();
        assert_eq!(out.len(), cfg.query_target_tokens().len() * cfg.patch_values());
        let img = decoded_to_image(&out, &cfg);
        assert_eq!(img.dimensions(), (8, 8));
    }

    #[test]
    fn repeated_forwards_are_bitwise_equal() {
        let cfg = tiny();
        let m = ModelState::<f32>::init(cfg).unwrap();
        let input = random_input(&cfg, 2);
        assert_eq!(
            m.forward(&input, TaskKind::Instance).unwrap(),
            m.forward(&input, TaskKind::Instance).unwrap()
        );
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let m = ModelState::<f32>::init(tiny()).unwrap();
        let bad = CanvasInput {
            pixels: vec![0.0f32; 10],
            mask: vec![false; 16],
        };
        assert!(matches!(m.forward(&bad, TaskKind::Category), Err(ModelError::GeometryMismatch(_))));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny();
        let m = ModelState::<f32>::init(cfg).unwrap();
        let maps = m.attention_maps(&random_input(&cfg, 5), TaskKind::Category).unwrap();
        let n = cfg.tokens();
        for row in maps.chunks(n) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn train_forward_matches_plain_forward() {
        let cfg = tiny();
        let m = ModelState::<f64>::init(cfg).unwrap();
        let input = random_input(&cfg, 7);
        let (out, _) = m.forward_train(&input, TaskKind::Category).unwrap();
        assert_eq!(out, m.forward(&input, TaskKind::Category).unwrap());
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let cfg = tiny();
        let m = ModelState::<f64>::init_with(cfg, &mut seeded(11)).unwrap();
        let input = random_input::<f64>(&cfg, 8);
        let w: Vec<f64> = (0..cfg.query_target_tokens().len() * cfg.patch_values())
            .map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5)
            .collect();
        let f = |inp: &CanvasInput<f64>| -> f64 { m.forward(inp, TaskKind::Category).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
        let (_, trace) = m.forward_train(&input, TaskKind::Category).unwrap();
        let grads = m.backward(
            &input,
            TaskKind::Category,
            &trace,
            &w,
            GradRequest {
                params: false,
                input: true,
            },
        );
        // pixel 0 sits in the (unmasked) example-source quadrant
        for &idx in &[0usize, 5, 100, 200] {
            let mut p = input.clone();
            p.pixels[idx] += 1e-5;
            let mut q = input.clone();
            q.pixels[idx] -= 1e-5;
            let num = (f(&p) - f(&q)) / 2e-5;
            let ana = grads.input[idx];
            assert!((num - ana).abs() <= 1e-6 * (1.0 + num.abs()), "idx {idx}: {ana} vs {num}");
        }
    }
}
