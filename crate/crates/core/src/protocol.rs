//! Synthetic benchmarks and run presets: the shapes training mixture,
//! example-based category segmentation, video propagation scoring, and the
//! ensemble / frame-count ablation tables.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use image::RgbImage;
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::data::{
    gen_shapes_sample, gen_shapes_sequence, AugmentConfig, DataError, Dataset, LabeledSample, MixtureSampler, MixtureSpec, SamplerConfig,
    ShapeSpec, VideoSample,
};
use crate::inference::{predict, vos_run_with, EnsembleSpec, InferenceError, Strategy};
use crate::metrics::{jf_score, ConfusionTally, FbTally, JfScore, Mask};
use crate::model::{CanvasInput, ModelConfig, ModelState, PosInit};
use crate::palette::{recolor, sample_palette, IdSelection, MixConfig, Palette};
use crate::parallel;
use crate::rng::{derive_seed, seeded};
use crate::segmap::{SegmentMap, TaskKind};
use crate::train::{
    config::{parse_value, ConfigError, KvConfig},
    train, TrainConfig, TrainError, TrainReport,
};

pub const SEMANTIC_TAG: &str = "shapes_semantic";
pub const INSTANCE_TAG: &str = "shapes_instance";

/// Knobs of the synthetic data and the training mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub image_side: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub n_videos: usize,
    pub video_frames: usize,
    pub mask_ratio: f64,
    pub p_mix: f64,
    pub p_view: f64,
    /// Mixture weight of the category-level dataset; the instance-level
    /// dataset gets the rest.
    pub semantic_weight: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            n_train: 512,
            n_test: 96,
            n_videos: 12,
            video_frames: 10,
            mask_ratio: 0.75,
            p_mix: 0.3,
            p_view: 0.5,
            semantic_weight: 0.5,
        }
    }
}

impl KvConfig for SyntheticConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
        match key {
            "image_side" => self.image_side = parse_value(key, value)?,
            "n_train" => self.n_train = parse_value(key, value)?,
            "n_test" => self.n_test = parse_value(key, value)?,
            "n_videos" => self.n_videos = parse_value(key, value)?,
            "video_frames" => self.video_frames = parse_value(key, value)?,
            "mask_ratio" => self.mask_ratio = parse_value(key, value)?,
            "p_mix" => self.p_mix = parse_value(key, value)?,
            "p_view" => self.p_view = parse_value(key, value)?,
            "semantic_weight" => self.semantic_weight = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("image_side".into(), self.image_side.to_string()),
            ("n_train".into(), self.n_train.to_string()),
            ("n_test".into(), self.n_test.to_string()),
            ("n_videos".into(), self.n_videos.to_string()),
            ("video_frames".into(), self.video_frames.to_string()),
            ("mask_ratio".into(), self.mask_ratio.to_string()),
            ("p_mix".into(), self.p_mix.to_string()),
            ("p_view".into(), self.p_view.to_string()),
            ("semantic_weight".into(), self.semantic_weight.to_string()),
        ]
    }
}

impl SyntheticConfig {
    pub fn shape_spec(&self) -> ShapeSpec {
        ShapeSpec {
            size: self.image_side,
            ..ShapeSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.image_side == 0 || self.n_train < 2 {
            return bad("image_side must be positive and n_train at least 2");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || self.mask_ratio == 0.0 {
            return bad("mask_ratio must lie in (0, 1]");
        }
        for (name, p) in [
            ("p_mix", self.p_mix),
            ("p_view", self.p_view),
            ("semantic_weight", self.semantic_weight),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::Invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Everything a training or evaluation run is configured by.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// Desk-scale preset: 4 layers of width 64 over 64-pixel images, with
    /// sin-cos initialized positional embeddings.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig {
                pos_init: PosInit::Sincos,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                base_lr: 1e-3,
                betas: (0.9, 0.95),
                ..TrainConfig::default()
            },
            data: SyntheticConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate()?;
        self.data.validate()?;
        if self.model.canvas_side != 2 * self.data.image_side {
            return Err(ConfigError::Invalid(format!(
                "canvas_side {} must be twice image_side {}",
                self.model.canvas_side, self.data.image_side
            )));
        }
        Ok(())
    }

    pub fn sections_mut(&mut self) -> [&mut dyn KvConfig; 3] {
        [&mut self.model, &mut self.train, &mut self.data]
    }

    pub fn sections(&self) -> [&dyn KvConfig; 3] {
        [&self.model, &self.train, &self.data]
    }
}

/// `n` independent shape scenes; sample `i` depends only on `(seed, i)`.
pub fn generate_pool(spec: &ShapeSpec, n: usize, seed: u64) -> Result<Vec<LabeledSample>, DataError> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(seed, i)).collect();
    parallel::map(&seeds, |&s| gen_shapes_sample(spec, &mut seeded(s)))
        .into_iter()
        .collect()
}

pub fn generate_videos(spec: &ShapeSpec, n: usize, frames: usize, seed: u64) -> Result<Vec<VideoSample>, DataError> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(seed, i)).collect();
    parallel::map(&seeds, |&s| gen_shapes_sequence(spec, frames, &mut seeded(s)))
        .into_iter()
        .collect()
}

/// Seeds of the disjoint synthetic splits derived from one run seed.
pub fn split_seeds(seed: u64) -> (u64, u64, u64) {
    (derive_seed(seed, 0x7472), derive_seed(seed, 0x7465), derive_seed(seed, 0x7669))
}

/// The same training scenes exposed as a category-level and an
/// instance-level dataset.
pub fn training_datasets(pool: Vec<LabeledSample>) -> Vec<Dataset> {
    vec![
        Dataset {
            tag: SEMANTIC_TAG.into(),
            kind: TaskKind::Category,
            samples: pool.clone(),
        },
        Dataset {
            tag: INSTANCE_TAG.into(),
            kind: TaskKind::Instance,
            samples: pool,
        },
    ]
}

pub fn training_sampler(data: &SyntheticConfig, patch: u32, datasets: Arc<Vec<Dataset>>, seed: u64) -> Result<MixtureSampler, DataError> {
    let spec = MixtureSpec::new(
        vec![
            (SEMANTIC_TAG.into(), data.semantic_weight),
            (INSTANCE_TAG.into(), 1.0 - data.semantic_weight),
        ],
        data.p_view,
    )?;
    let cfg = SamplerConfig {
        mask_ratio: data.mask_ratio,
        patch,
        selection: IdSelection::default(),
        augment: AugmentConfig {
            out_size: data.image_side,
            ..AugmentConfig::default()
        },
        mix: MixConfig {
            out_size: data.image_side,
            ..MixConfig::default()
        },
        p_mix: data.p_mix,
        max_retries: 16,
    };
    MixtureSampler::new(spec, datasets, cfg, seed)
}

/// Trains a fresh model on the synthetic mixture described by `run`.
pub fn train_synthetic<C>(
    run: &RunConfig,
    log: Option<&mut dyn std::io::Write>,
    on_step: C,
) -> Result<(ModelState<f32>, TrainReport), TrainError>
where
    C: FnMut(usize, &ModelState<f32>) -> Result<(), TrainError>,
{
    run.validate()?;
    let (train_seed, _, _) = split_seeds(run.train.seed);
    let pool = generate_pool(&run.data.shape_spec(), run.data.n_train, train_seed)?;
    let datasets = Arc::new(training_datasets(pool));
    let mut sampler = training_sampler(&run.data, run.model.patch, datasets, derive_seed(run.train.seed, 0x5a))?;
    let mut model = ModelState::<f32>::init(run.model)?;
    let model_cfg = run.model;
    let batch_size = run.train.batch_size;
    let report = train(
        &mut model,
        &run.train,
        |_| {
            (0..batch_size)
                .map(|_| {
                    let ex = sampler.draw()?;
                    Ok((CanvasInput::from_canvas(&ex.canvas, &model_cfg)?, ex.kind))
                })
                .collect()
        },
        log,
        on_step,
    )?;
    Ok((model, report))
}

/// Support pool and held-out queries for example-based category
/// segmentation.
#[derive(Clone, Debug)]
pub struct CategoryBenchmark {
    pub support: Vec<LabeledSample>,
    pub queries: Vec<LabeledSample>,
}

impl CategoryBenchmark {
    /// Support = the training scenes, queries = fresh held-out scenes.
    pub fn synthetic(data: &SyntheticConfig, seed: u64) -> Result<Self, DataError> {
        let (train_seed, test_seed, _) = split_seeds(seed);
        let spec = data.shape_spec();
        Ok(Self {
            support: generate_pool(&spec, data.n_train, train_seed)?,
            queries: generate_pool(&spec, data.n_test, test_seed)?,
        })
    }

    /// Support samples containing `category`, in pool order.
    pub fn support_with(&self, category: u32) -> Vec<usize> {
        (0..self.support.len())
            .filter(|&i| self.support[i].category_set().contains(&category))
            .collect()
    }
}

/// One (query, category) evaluation with its chosen support examples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub query: usize,
    pub category: u32,
    pub examples: Vec<usize>,
    pub seed: u64,
}

/// For every query and every category it contains, `n_examples` support
/// samples with that category drawn without replacement.
pub fn episodes(bench: &CategoryBenchmark, n_examples: usize, seed: u64) -> Vec<Episode> {
    let categories: BTreeSet<u32> = bench.queries.iter().flat_map(|q| q.category_set()).collect();
    let by_cat: BTreeMap<u32, Vec<usize>> = categories.iter().map(|&c| (c, bench.support_with(c))).collect();
    let mut out = Vec::new();
    for (qi, q) in bench.queries.iter().enumerate() {
        for c in q.category_set() {
            let pool = &by_cat[&c];
            if pool.is_empty() {
                continue;
            }
            let ep_seed = derive_seed(derive_seed(seed, qi as u64), c as u64);
            let mut rng = seeded(ep_seed);
            let k = n_examples.min(pool.len());
            let examples = sample_indices(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
            out.push(Episode {
                query: qi,
                category: c,
                examples,
                seed: ep_seed,
            });
        }
    }
    out
}

/// Binary map of `category` (id 1) in a sample.
pub fn category_mask(sample: &LabeledSample, category: u32) -> SegmentMap {
    sample
        .segment_map(TaskKind::Category)
        .map_ids(|id| u32::from(id == category && id != 0))
}

/// Episode palette: one random color for id 1.
pub fn episode_palette(ep: &Episode) -> Palette {
    sample_palette(&BTreeSet::from([1]), &mut seeded(ep.seed)).expect("a single color always fits")
}

/// Example pairs of an episode colored with `palette`.
pub fn episode_examples(bench: &CategoryBenchmark, ep: &Episode, palette: &Palette) -> Vec<(RgbImage, RgbImage)> {
    ep.examples
        .iter()
        .map(|&i| {
            let s = &bench.support[i];
            (
                s.source.clone(),
                recolor(&category_mask(s, ep.category), palette).expect("palette covers id 1"),
            )
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub miou: f64,
    pub fb_iou: f64,
    pub per_class: BTreeMap<u32, f64>,
    pub episodes: usize,
}

/// Scores binary predictions: per-category IoU accumulated over episodes,
/// mean over categories, and FB-IoU over all episodes.
pub fn score_episodes(bench: &CategoryBenchmark, eps: &[Episode], preds: &[SegmentMap]) -> CategoryReport {
    let mut tally = ConfusionTally::new();
    let mut fb = FbTally::default();
    for (ep, pred) in eps.iter().zip(preds) {
        let gt = category_mask(&bench.queries[ep.query], ep.category);
        let lift = |m: &SegmentMap| m.map_ids(|v| if v == 1 { ep.category } else { 0 });
        tally.add(&lift(pred), &lift(&gt)).expect("query-sized prediction");
        fb.add(&Mask::foreground(pred), &Mask::foreground(&gt))
            .expect("query-sized prediction");
    }
    let classes: BTreeSet<u32> = eps.iter().map(|e| e.category).collect();
    let per_class: BTreeMap<u32, f64> = classes.iter().filter_map(|&c| tally.iou(c).map(|v| (c, v))).collect();
    let miou = if classes.is_empty() {
        0.0
    } else {
        tally.miou(&classes).unwrap_or(0.0)
    };
    CategoryReport {
        miou,
        fb_iou: fb.fb_iou(),
        per_class,
        episodes: eps.len(),
    }
}

/// Grid side used when `n` examples are tiled spatially.
pub fn grid_for(n: usize) -> u32 {
    (n as f64).sqrt().ceil().max(1.0) as u32
}

/// Runs every episode with `strategy` over its examples.
pub fn evaluate_category(
    model: &ModelState<f32>,
    bench: &CategoryBenchmark,
    eps: &[Episode],
    strategy: Strategy,
) -> Result<CategoryReport, InferenceError> {
    let preds: Vec<SegmentMap> = parallel::map(eps, |ep| {
        let palette = episode_palette(ep);
        let examples = episode_examples(bench, ep, &palette);
        let spec = match strategy {
            Strategy::Single => EnsembleSpec::single(examples[0].0.clone(), examples[0].1.clone()),
            Strategy::Spatial => EnsembleSpec {
                strategy,
                grid_n: grid_for(examples.len()),
                examples,
            },
            Strategy::Feature => EnsembleSpec {
                strategy,
                examples,
                grid_n: 1,
            },
        };
        predict(model, &spec, &bench.queries[ep.query].source, TaskKind::Category, &palette)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    Ok(score_episodes(bench, eps, &preds))
}

/// Baseline that copies the first example's mask as the prediction.
pub fn copy_example_baseline(bench: &CategoryBenchmark, eps: &[Episode]) -> CategoryReport {
    let preds: Vec<SegmentMap> = eps
        .iter()
        .map(|ep| category_mask(&bench.support[ep.examples[0]], ep.category))
        .collect();
    score_episodes(bench, eps, &preds)
}

/// Evaluates with one fixed example pair per category (e.g. tuned prompts),
/// each colored with its own palette.
pub fn evaluate_with_prompts(
    model: &ModelState<f32>,
    bench: &CategoryBenchmark,
    eps: &[Episode],
    prompts: &BTreeMap<u32, ((RgbImage, RgbImage), Palette)>,
) -> Result<CategoryReport, InferenceError> {
    let kept: Vec<Episode> = eps.iter().filter(|e| prompts.contains_key(&e.category)).cloned().collect();
    let preds: Vec<SegmentMap> = parallel::map(&kept, |ep| {
        let ((s, t), palette) = &prompts[&ep.category];
        predict(
            model,
            &EnsembleSpec::single(s.clone(), t.clone()),
            &bench.queries[ep.query].source,
            TaskKind::Category,
            palette,
        )
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    Ok(score_episodes(bench, &kept, &preds))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video: usize,
    pub score: JfScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VosReport {
    pub mean: JfScore,
    pub videos: Vec<VideoScore>,
}

/// Propagates each video's first instance map and scores J/F per video;
/// the reported mean averages videos.
pub fn evaluate_vos(
    model: &ModelState<f32>,
    videos: &[VideoSample],
    k: usize,
    strategy: Strategy,
    seed: u64,
) -> Result<VosReport, InferenceError> {
    let idx: Vec<usize> = (0..videos.len()).collect();
    let scores: Vec<VideoScore> = parallel::map(&idx, |&i| -> Result<VideoScore, InferenceError> {
        let v = &videos[i];
        let frames: Vec<RgbImage> = v.frames.iter().map(|f| f.source.clone()).collect();
        let gts: Vec<SegmentMap> = v.frames.iter().map(|f| f.segment_map(TaskKind::Instance)).collect();
        let preds = vos_run_with(model, &frames, &gts[0], k, strategy, derive_seed(seed, i as u64))?;
        let (score, _) = jf_score(&preds, &gts).map_err(|e| InferenceError::Geometry(e.to_string()))?;
        Ok(VideoScore { video: i, score })
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let n = scores.len().max(1) as f64;
    let j = scores.iter().map(|s| s.score.j).sum::<f64>() / n;
    let f = scores.iter().map(|s| s.score.f).sum::<f64>() / n;
    Ok(VosReport {
        mean: JfScore { j, f, jf: (j + f) / 2.0 },
        videos: scores,
    })
}

/// One row of the ensemble-strategy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub examples: usize,
    /// `None` for the single-example row.
    pub strategy: Option<Strategy>,
    pub vos: JfScore,
    pub miou: f64,
    pub fb_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    pub frames: usize,
    pub vos: JfScore,
}

/// Rows `(1, –)`, `(4, spatial)`, `(4, feature)`, `(8, feature)`.
pub const STRATEGY_GRID: [(usize, Option<Strategy>); 4] = [
    (1, None),
    (4, Some(Strategy::Spatial)),
    (4, Some(Strategy::Feature)),
    (8, Some(Strategy::Feature)),
];

pub const FRAME_GRID: [usize; 5] = [1, 4, 8, 12, 16];

pub fn strategy_table(
    model: &ModelState<f32>,
    bench: &CategoryBenchmark,
    videos: &[VideoSample],
    grid: &[(usize, Option<Strategy>)],
    seed: u64,
) -> Result<Vec<StrategyRow>, InferenceError> {
    grid.iter()
        .map(|&(n, strategy)| {
            let s = strategy.unwrap_or(Strategy::Single);
            let eps = episodes(bench, n, seed);
            let cat = evaluate_category(model, bench, &eps, s)?;
            let vos = evaluate_vos(model, videos, n, s, seed)?;
            Ok(StrategyRow {
                examples: n,
                strategy,
                vos: vos.mean,
                miou: cat.miou,
                fb_iou: cat.fb_iou,
            })
        })
        .collect()
}

pub fn frame_table(model: &ModelState<f32>, videos: &[VideoSample], frames: &[usize], seed: u64) -> Result<Vec<FrameRow>, InferenceError> {
    frames
        .iter()
        .map(|&k| {
            Ok(FrameRow {
                frames: k,
                vos: evaluate_vos(model, videos, k, Strategy::Feature, seed)?.mean,
            })
        })
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

pub fn strategy_csv(rows: &[StrategyRow]) -> String {
    let mut out = String::from("examples,ensemble,jf,j,f,miou,fb_iou\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.examples,
            r.strategy.map_or("-", |s| s.as_str()),
            pct(r.vos.jf),
            pct(r.vos.j),
            pct(r.vos.f),
            pct(r.miou),
            pct(r.fb_iou)
        ));
    }
    out
}

pub fn frame_csv(rows: &[FrameRow]) -> String {
    let mut out = String::from("frames,jf,j,f\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.frames, pct(r.vos.jf), pct(r.vos.j), pct(r.vos.f)));
    }
    out
}
