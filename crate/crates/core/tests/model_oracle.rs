//! The model checked against a naive, loop-only re-implementation.

use icseg::model::{CanvasInput, EnsembleHook, ModelConfig, ModelState, ParamLayout};
use icseg::rng::seeded;
use icseg::segmap::TaskKind;
use rand::Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        patch: 4,
        dim: 8,
        depth: 2,
        heads: 2,
        canvas_side: 16,
        seed: 11,
        ..Default::default()
    }
}

fn model64(cfg: ModelConfig) -> ModelState<f64> {
    let mut m = ModelState::<f32>::init(cfg).unwrap().cast::<f64>();
    // nonzero biases, gains and embeddings so every term is exercised
    let mut rng = seeded(99);
    for v in m.params_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    m
}

fn random_input(cfg: &ModelConfig, seed: u64) -> CanvasInput<f64> {
    let mut rng = seeded(seed);
    let side = cfg.canvas_side as usize;
    let pixels = (0..side * side * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut mask = vec![false; cfg.tokens()];
    for t in cfg.query_target_tokens() {
        mask[t] = rng.random_bool(0.8);
    }
    mask[cfg.query_target_tokens()[0]] = true;
    CanvasInput { pixels, mask }
}

fn ln(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * g[i] + b[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// `y = x W + b` with `W` stored `[in, out]`.
fn linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|j| b[j] + x.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
        .collect()
}

struct Reference<'a> {
    cfg: ModelConfig,
    p: &'a [f64],
    l: &'a ParamLayout,
}

impl Reference<'_> {
    fn t(&self, r: &std::ops::Range<usize>) -> &[f64] {
        &self.p[r.clone()]
    }

    fn embed(&self, inp: &CanvasInput<f64>, kind: TaskKind) -> Vec<Vec<f64>> {
        let (g, p, d) = (self.cfg.grid(), self.cfg.patch as usize, self.cfg.dim);
        let side = self.cfg.canvas_side as usize;
        let task = match kind {
            TaskKind::Category => self.t(&self.l.task_category),
            TaskKind::Instance => self.t(&self.l.task_instance),
        };
        (0..g * g)
            .map(|tok| {
                let (gy, gx) = (tok / g, tok % g);
                let mut row = if inp.mask[tok] {
                    self.t(&self.l.mask_token).to_vec()
                } else {
                    let mut patch = Vec::new();
                    for py in 0..p {
                        for px in 0..p {
                            for c in 0..3 {
                                patch.push(inp.pixels[((gy * p + py) * side + gx * p + px) * 3 + c]);
                            }
                        }
                    }
                    linear(&patch, self.t(&self.l.patch_w), self.t(&self.l.patch_b))
                };
                for i in 0..d {
                    row[i] += self.p[self.l.pos.start + tok * d + i];
                    if gx >= g / 2 {
                        row[i] += task[i];
                    }
                }
                row
            })
            .collect()
    }

    fn attention(&self, l: usize, x: &mut [Vec<f64>]) {
        let b = &self.l.blocks[l];
        let (d, heads) = (self.cfg.dim, self.cfg.heads);
        let dh = d / heads;
        let qkv: Vec<Vec<f64>> = x
            .iter()
            .map(|r| linear(&ln(r, self.t(&b.norm1_w), self.t(&b.norm1_b)), self.t(&b.qkv_w), self.t(&b.qkv_b)))
            .collect();
        let n = x.len();
        let mut attn = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|e| qkv[i][h * dh + e] * qkv[j][d + h * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..n {
                    let w = (scores[j] - m).exp() / z;
                    for e in 0..dh {
                        attn[i][h * dh + e] += w * qkv[j][2 * d + h * dh + e];
                    }
                }
            }
        }
        for (row, a) in x.iter_mut().zip(&attn) {
            let y = linear(a, self.t(&b.proj_w), self.t(&b.proj_b));
            row.iter_mut().zip(y).for_each(|(r, v)| *r += v);
        }
    }

    fn mlp(&self, l: usize, x: &mut [Vec<f64>]) {
        let b = &self.l.blocks[l];
        for row in x.iter_mut() {
            let h: Vec<f64> = linear(&ln(row, self.t(&b.norm2_w), self.t(&b.norm2_b)), self.t(&b.fc1_w), self.t(&b.fc1_b))
                .into_iter()
                .map(gelu)
                .collect();
            let y = linear(&h, self.t(&b.fc2_w), self.t(&b.fc2_b));
            row.iter_mut().zip(y).for_each(|(r, v)| *r += v);
        }
    }

    fn head(&self, x: &[Vec<f64>]) -> Vec<f64> {
        let g = self.cfg.grid();
        let mut out = Vec::new();
        for gy in g / 2..g {
            for gx in g / 2..g {
                let f = ln(&x[gy * g + gx], self.t(&self.l.norm_w), self.t(&self.l.norm_b));
                out.extend(linear(&f, self.t(&self.l.dec_w), self.t(&self.l.dec_b)));
            }
        }
        out
    }

    /// Lockstep batch; with `average`, query-row tokens are replaced by their
    /// plain batch mean after every attention sublayer.
    fn forward(&self, inputs: &[CanvasInput<f64>], kind: TaskKind, average: bool) -> Vec<Vec<f64>> {
        let g = self.cfg.grid();
        let mut xs: Vec<Vec<Vec<f64>>> = inputs.iter().map(|i| self.embed(i, kind)).collect();
        for l in 0..self.cfg.depth {
            for x in xs.iter_mut() {
                self.attention(l, x);
            }
            if average {
                for tok in (g / 2) * g..g * g {
                    for i in 0..self.cfg.dim {
                        let mean = xs.iter().map(|x| x[tok][i]).sum::<f64>() / xs.len() as f64;
                        xs.iter_mut().for_each(|x| x[tok][i] = mean);
                    }
                }
            }
            for x in xs.iter_mut() {
                self.mlp(l, x);
            }
        }
        xs.iter().map(|x| self.head(x)).collect()
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn param_count_matches_closed_form() {
    for cfg in [tiny(), ModelConfig::default()] {
        let (d, pv, n, depth) = (cfg.dim, cfg.patch_values(), cfg.tokens(), cfg.depth);
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let expected = (pv * d + d) + n * d + d + 2 * d + depth * block + 2 * d + (d * pv + pv);
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(ModelState::<f32>::init(cfg).unwrap().params().len(), expected);
    }
}

#[test]
fn forward_matches_reference() {
    let cfg = tiny();
    let m = model64(cfg);
    let r = Reference {
        cfg,
        p: m.params(),
        l: m.layout(),
    };
    for (seed, kind) in [(1, TaskKind::Category), (2, TaskKind::Instance)] {
        let inp = random_input(&cfg, seed);
        let got = m.forward(&inp, kind).unwrap();
        let want = &r.forward(std::slice::from_ref(&inp), kind, false)[0];
        assert!(max_abs_diff(&got, want) < 1e-10, "{kind:?}: {}", max_abs_diff(&got, want));
    }
}

#[test]
fn ensemble_forward_matches_reference() {
    let cfg = tiny();
    let m = model64(cfg);
    let r = Reference {
        cfg,
        p: m.params(),
        l: m.layout(),
    };
    let inputs: Vec<_> = (0..3).map(|s| random_input(&cfg, 10 + s)).collect();
    let want = r.forward(&inputs, TaskKind::Category, true);
    let hook = EnsembleHook {
        average_query: true,
        record: false,
    };
    let (got, _) = m.forward_ensemble(&inputs, TaskKind::Category, hook).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert!(max_abs_diff(g, w) < 1e-10);
    }
    // without the hook every canvas is independent
    let (plain, _) = m.forward_ensemble(&inputs, TaskKind::Category, EnsembleHook::default()).unwrap();
    let solo = r.forward(&inputs, TaskKind::Category, false);
    for (g, w) in plain.iter().zip(&solo) {
        assert!(max_abs_diff(g, w) < 1e-10);
    }
}

#[test]
fn masked_patch_content_is_ignored() {
    let cfg = tiny();
    let m = model64(cfg);
    let mut a = random_input(&cfg, 5);
    let qt = cfg.query_target_tokens();
    a.mask.iter_mut().for_each(|v| *v = false);
    qt.iter().for_each(|&t| a.mask[t] = true);
    let mut b = a.clone();
    // scribble over the query-target quadrant only
    let side = cfg.canvas_side as usize;
    for y in side / 2..side {
        for x in side / 2..side {
            for c in 0..3 {
                b.pixels[(y * side + x) * 3 + c] = 0.37;
            }
        }
    }
    assert_eq!(
        m.forward(&a, TaskKind::Category).unwrap(),
        m.forward(&b, TaskKind::Category).unwrap()
    );
}
