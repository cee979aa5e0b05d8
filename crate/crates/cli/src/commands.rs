use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use icseg::data::{load_video, save_dataset, save_video, Dataset, SHAPES_TAG};
use icseg::imageops::{load_rgb, save_rgb};
use icseg::inference::{predict_image, vos_run_with, EnsembleSpec, Strategy};
use icseg::metrics::{jf_score, ConfusionTally, FbTally, Mask};
use icseg::model::{checkpoint, ModelError, ModelState};
use icseg::palette::{decode, recolor, sample_palette};
use icseg::protocol::{
    category_mask, copy_example_baseline, episodes, evaluate_category, evaluate_vos, evaluate_with_prompts, frame_csv, frame_table,
    generate_pool, generate_videos, split_seeds, strategy_csv, strategy_table, train_synthetic, CategoryBenchmark, RunConfig, FRAME_GRID,
    STRATEGY_GRID,
};
use icseg::rng::{derive_seed, seeded};
use icseg::segmap::{SegmentMap, TaskKind};
use icseg::train::{tune_prompt, PromptConfig, PromptTensor, TrainError};

use crate::manifest::{checkpoint_hash, write_atomic, RunManifest};
use crate::{
    resolve_config, runtime, AblateArgs, CliError, Common, EvalArgs, GenArgs, PredictArgs, ServeArgs, TrainArgs, TuneArgs, VosArgs,
};

type Overrides = BTreeMap<String, String>;

struct Run {
    command: &'static str,
    config: RunConfig,
    started: Instant,
    checkpoint_hash: Option<String>,
}

impl Run {
    fn start(command: &'static str, common: &Common, overrides: &Overrides) -> Result<Self, CliError> {
        Ok(Self {
            command,
            config: resolve_config(common, overrides)?,
            started: Instant::now(),
            checkpoint_hash: None,
        })
    }

    fn seed(&self) -> u64 {
        self.config.train.seed
    }

    /// Loads a checkpoint; its geometry overrides the configured one.
    fn load_model(&mut self, path: &Path) -> Result<ModelState<f32>, CliError> {
        let model = checkpoint::load(path, None).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        self.adopt(&model);
        self.checkpoint_hash = Some(checkpoint_hash(path).map_err(runtime)?);
        Ok(model)
    }

    fn model_or_untrained(&mut self, path: Option<&Path>, stderr: &mut dyn Write) -> Result<ModelState<f32>, CliError> {
        match path {
            Some(p) => self.load_model(p),
            None => {
                let _ = writeln!(
                    stderr,
                    "note: no --checkpoint given, using an untrained model (model_seed {})",
                    self.config.model.seed
                );
                ModelState::init(self.config.model).map_err(model_error)
            }
        }
    }

    fn adopt(&mut self, model: &ModelState<f32>) {
        self.config.model = *model.config();
        self.config.data.image_side = self.config.model.image_side();
    }

    fn finish(self, common: &Common, out: Option<&Path>, metrics: serde_json::Value) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config: self.config,
            seed: self.config.train.seed,
            checkpoint_hash: self.checkpoint_hash,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            metrics,
        };
        let path = common.manifest.clone().or_else(|| out.map(|o| o.join("manifest.json")));
        if let Some(path) = path {
            manifest
                .write(&path)
                .map_err(|e| runtime(format!("writing manifest {}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::BadConfig(m) => CliError::Config(m),
        other => runtime(other),
    }
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(c) => c.into(),
        other => runtime(other),
    }
}

fn print_json(stdout: &mut dyn Write, v: &serde_json::Value) -> Result<(), CliError> {
    writeln!(stdout, "{}", serde_json::to_string_pretty(v).expect("json value")).map_err(runtime)
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("creating {}: {e}", dir.display())))
}

pub(crate) fn gen(a: &GenArgs, overrides: &Overrides, stdout: &mut dyn Write) -> Result<(), CliError> {
    let run = Run::start("gen", &a.common, overrides)?;
    let n = a.n.unwrap_or(run.config.data.n_train);
    let spec = run.config.data.shape_spec();
    let samples = generate_pool(&spec, n, run.seed()).map_err(runtime)?;
    let instances: usize = samples.iter().map(|s| s.map.id_set().len()).sum();
    save_dataset(
        &a.out,
        &Dataset {
            tag: SHAPES_TAG.into(),
            kind: TaskKind::Instance,
            samples,
        },
    )
    .map_err(runtime)?;
    if a.videos > 0 {
        let videos = generate_videos(&spec, a.videos, run.config.data.video_frames, split_seeds(run.seed()).2).map_err(runtime)?;
        for (i, v) in videos.iter().enumerate() {
            save_video(a.out.join("videos"), &format!("seq{i:03}"), v).map_err(runtime)?;
        }
    }
    let metrics = json!({ "scenes": n, "instances": instances, "videos": a.videos });
    print_json(stdout, &metrics)?;
    run.finish(&a.common, Some(&a.out), metrics)
}

pub(crate) fn train(a: &TrainArgs, overrides: &Overrides, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut run = Run::start("train", &a.common, overrides)?;
    create_dir(&a.out)?;
    let log_path = a.out.join("train.log");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(runtime)?);
    let (model, report) = train_synthetic(&run.config, Some(&mut log), |_, _| Ok(())).map_err(train_error)?;
    log.flush().map_err(runtime)?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.out.join("model.ckpt"));
    checkpoint::save(&model, &ckpt).map_err(runtime)?;
    run.checkpoint_hash = Some(checkpoint_hash(&ckpt).map_err(runtime)?);
    let tail = &report.losses[report.losses.len().saturating_sub(50)..];
    let metrics = json!({
        "steps": report.losses.len(),
        "first_loss": report.losses.first(),
        "final_loss": report.losses.last(),
        "mean_loss_last_50": tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        "param_count": model.param_count(),
        "model_checksum": model.checksum(),
    });
    print_json(stdout, &metrics)?;
    run.finish(&a.common, Some(&a.out), metrics)
}

/// `*.png` files of a directory, by name.
fn png_names(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

fn score_mask_dirs(pred: &Path, gt: &Path) -> Result<serde_json::Value, CliError> {
    let names = png_names(gt)?;
    if names.is_empty() {
        return Err(runtime(format!("no masks in {}", gt.display())));
    }
    let mut tally = ConfusionTally::new();
    let mut fb = FbTally::default();
    let mut classes = BTreeSet::new();
    for name in &names {
        let g = SegmentMap::load_png(gt.join(name), TaskKind::Category).map_err(|e| runtime(format!("{name}: {e}")))?;
        let p = SegmentMap::load_png(pred.join(name), TaskKind::Category).map_err(|e| runtime(format!("prediction {name}: {e}")))?;
        classes.extend(g.id_set());
        classes.extend(p.id_set());
        tally.add(&p, &g).map_err(|e| runtime(format!("{name}: {e}")))?;
        fb.add(&Mask::foreground(&p), &Mask::foreground(&g)).map_err(runtime)?;
    }
    let miou = if classes.is_empty() {
        1.0
    } else {
        tally.miou(&classes).map_err(runtime)?
    };
    Ok(json!({ "images": names.len(), "miou": miou, "fb_iou": fb.fb_iou(), "per_class": tally.per_class() }))
}

pub(crate) fn eval(a: &EvalArgs, overrides: &Overrides, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut run = Run::start("eval", &a.common, overrides)?;
    let metrics = match (&a.pred, &a.gt, &a.checkpoint) {
        (Some(pred), Some(gt), _) => score_mask_dirs(pred, gt)?,
        (_, _, Some(ckpt)) => {
            let model = run.load_model(ckpt)?;
            let bench = CategoryBenchmark::synthetic(&run.config.data, run.seed()).map_err(runtime)?;
            let eps = episodes(&bench, a.examples.max(1), run.seed());
            let report = evaluate_category(&model, &bench, &eps, a.strategy).map_err(runtime)?;
            let baseline = copy_example_baseline(&bench, &eps);
            json!({
                "strategy": a.strategy,
                "examples": a.examples,
                "episodes": report.episodes,
                "miou": report.miou,
                "fb_iou": report.fb_iou,
                "per_class": report.per_class,
                "copy_baseline_miou": baseline.miou,
            })
        }
        _ => return Err(CliError::Config("eval needs --checkpoint or --pred with --gt".into())),
    };
    print_json(stdout, &metrics)?;
    run.finish(&a.common, a.out.as_deref(), metrics)
}

fn parse_example(spec: &str) -> Result<(PathBuf, PathBuf), CliError> {
    spec.split_once(':')
        .map(|(s, m)| (PathBuf::from(s), PathBuf::from(m)))
        .ok_or_else(|| CliError::Config(format!("--examples entry `{spec}` is not `source.png:mask.png`")))
}

pub(crate) fn predict(a: &PredictArgs, overrides: &Overrides, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut run = Run::start("predict", &a.common, overrides)?;
    let pairs = a.examples.iter().map(|s| parse_example(s)).collect::<Result<Vec<_>, _>>()?;
    let model = run.load_model(&a.checkpoint)?;
    let mut sources = Vec::new();
    let mut masks = Vec::new();
    for (s, m) in &pairs {
        sources.push(load_rgb(s).map_err(|e| runtime(format!("{}: {e}", s.display())))?);
        masks.push(SegmentMap::load_png(m, a.task_kind).map_err(|e| runtime(format!("{}: {e}", m.display())))?);
    }
    let ids: BTreeSet<u32> = masks.iter().flat_map(|m| m.id_set()).collect();
    if ids.is_empty() {
        return Err(runtime("example masks contain no segments"));
    }
    let palette = sample_palette(&ids, &mut seeded(run.seed())).map_err(runtime)?;
    let examples = sources
        .into_iter()
        .zip(&masks)
        .map(|(s, m)| Ok((s, recolor(m, &palette).map_err(runtime)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let grid_n = a.grid_n.unwrap_or_else(|| (examples.len() as f64).sqrt().ceil() as u32);
    let spec = match a.strategy {
        Strategy::Single => EnsembleSpec::single(examples[0].0.clone(), examples[0].1.clone()),
        strategy => EnsembleSpec {
            strategy,
            examples,
            grid_n,
        },
    };
    let query = load_rgb(&a.query).map_err(|e| runtime(format!("{}: {e}", a.query.display())))?;
    let pred = predict_image(&model, &spec, &query, a.task_kind).map_err(runtime)?;
    let map = decode(&pred.image, &palette, a.task_kind);
    create_dir(&a.out)?;
    save_rgb(&pred.image, a.out.join("prediction.png")).map_err(runtime)?;
    map.save_png(a.out.join("mask.png")).map_err(runtime)?;
    write_atomic(&a.out.join("palette.json"), palette.to_json().as_bytes()).map_err(runtime)?;
    let mut pixels: BTreeMap<u32, usize> = BTreeMap::new();
    for &id in map.ids() {
        *pixels.entry(id).or_default() += 1;
    }
    let metrics = json!({ "strategy": a.strategy, "examples": pairs.len(), "pixels_per_id": pixels });
    print_json(stdout, &metrics)?;
    run.finish(&a.common, Some(&a.out), metrics)
}

pub(crate) fn tune(a: &TuneArgs, overrides: &Overrides, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut run = Run::start("tune", &a.common, overrides)?;
    if a.examples == 0 || a.steps == 0 {
        return Err(CliError::Config("--examples and --steps must be positive".into()));
    }
    let model = run.load_model(&a.checkpoint)?;
    let seed = run.seed();
    let bench = CategoryBenchmark::synthetic(&run.config.data, seed).map_err(runtime)?;
    let categories: BTreeSet<u32> = bench.queries.iter().flat_map(|q| q.category_set()).collect();
    let prompt_dir = a.out.join("prompts");
    create_dir(&prompt_dir)?;
    let mut prompts = BTreeMap::new();
    let mut per_category = BTreeMap::new();
    for &c in &categories {
        let pool = bench.support_with(c);
        if pool.len() < 2 {
            continue;
        }
        let palette = sample_palette(&BTreeSet::from([1]), &mut seeded(derive_seed(seed, u64::from(c)))).map_err(runtime)?;
        let colored = |i: usize| {
            let s = &bench.support[i];
            (
                s.source.clone(),
                recolor(&category_mask(s, c), &palette).expect("palette covers id 1"),
            )
        };
        let (init_src, init_tgt) = colored(pool[0]);
        let task: Vec<_> = pool[1..].iter().take(a.examples).map(|&i| colored(i)).collect();
        let cfg = PromptConfig {
            steps: a.steps,
            lr: a.lr,
            batch_size: task.len().min(4),
            learn_source: true,
            seed: derive_seed(seed, u64::from(c) + 1000),
        };
        let (prompt, report) = tune_prompt(
            &model,
            PromptTensor::from_images(&init_src, &init_tgt),
            &task,
            TaskKind::Category,
            &cfg,
        )
        .map_err(train_error)?;
        let (ps, pt) = prompt.to_images();
        save_rgb(&ps, prompt_dir.join(format!("cat{c:03}_source.png"))).map_err(runtime)?;
        save_rgb(&pt, prompt_dir.join(format!("cat{c:03}_target.png"))).map_err(runtime)?;
        per_category.insert(
            c,
            json!({ "first_loss": report.losses.first(), "final_loss": report.losses.last(), "task_images": task.len() }),
        );
        prompts.insert(c, ((ps, pt), palette));
    }
    let eps: Vec<_> = episodes(&bench, 1, seed)
        .into_iter()
        .filter(|e| prompts.contains_key(&e.category))
        .collect();
    let before = evaluate_category(&model, &bench, &eps, Strategy::Single).map_err(runtime)?;
    let after = evaluate_with_prompts(&model, &bench, &eps, &prompts).map_err(runtime)?;
    let metrics = json!({
        "steps": a.steps,
        "episodes": eps.len(),
        "miou_before": before.miou,
        "miou_after": after.miou,
        "fb_iou_before": before.fb_iou,
        "fb_iou_after": after.fb_iou,
        "categories": per_category,
    });
    print_json(stdout, &metrics)?;
    run.finish(&a.common, Some(&a.out), metrics)
}

pub(crate) fn vos(a: &VosArgs, overrides: &Overrides, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut run = Run::start("vos", &a.common, overrides)?;
    if a.k_frames == 0 {
        return Err(CliError::Config("--k-frames must be at least 1".into()));
    }
    let model = run.load_model(&a.checkpoint)?;
    let seed = run.seed();
    let metrics = match &a.video {
        Some(dir) => {
            let (root, tag) = match (dir.parent(), dir.file_name()) {
                (Some(r), Some(t)) => (r.to_path_buf(), t.to_string_lossy().into_owned()),
                _ => return Err(CliError::Config(format!("bad video path {}", dir.display()))),
            };
            let video = load_video(&root, &tag).map_err(runtime)?;
            let frames: Vec<_> = video.frames.iter().map(|f| f.source.clone()).collect();
            let gts: Vec<_> = video.frames.iter().map(|f| f.segment_map(TaskKind::Instance)).collect();
            if gts.is_empty() {
                return Err(runtime(format!("{} has no frames", dir.display())));
            }
            let preds = vos_run_with(&model, &frames, &gts[0], a.k_frames, a.strategy, derive_seed(seed, 0)).map_err(runtime)?;
            let (score, per_frame) = jf_score(&preds, &gts).map_err(runtime)?;
            if let Some(out) = &a.out {
                let dir = out.join("masks");
                create_dir(&dir)?;
                for (i, p) in preds.iter().enumerate() {
                    p.save_png(dir.join(format!("{i:05}.png"))).map_err(runtime)?;
                }
            }
            json!({ "k_frames": a.k_frames, "strategy": a.strategy, "mean": score, "frames": per_frame })
        }
        None => {
            let d = &run.config.data;
            let videos = generate_videos(&d.shape_spec(), d.n_videos, d.video_frames, split_seeds(seed).2).map_err(runtime)?;
            let report = evaluate_vos(&model, &videos, a.k_frames, a.strategy, seed).map_err(runtime)?;
            json!({ "k_frames": a.k_frames, "strategy": a.strategy, "mean": report.mean, "videos": report.videos })
        }
    };
    print_json(stdout, &metrics)?;
    run.finish(&a.common, a.out.as_deref(), metrics)
}

pub(crate) fn serve(a: &ServeArgs, overrides: &Overrides, stderr: &mut dyn Write) -> Result<(), CliError> {
    let mut run = Run::start("serve", &a.common, overrides)?;
    let model = run.model_or_untrained(a.checkpoint.as_deref(), stderr)?;
    let model_id = a
        .checkpoint
        .as_ref()
        .and_then(|p| p.file_stem())
        .map_or_else(|| "untrained".to_string(), |s| s.to_string_lossy().into_owned());
    let state = icseg_service::AppState::new(
        model,
        icseg_service::ServiceConfig {
            model_id,
            ..Default::default()
        },
    );
    let addr = std::net::SocketAddr::from(([0, 0, 0, 0], a.port));
    let _ = writeln!(stderr, "listening on http://{addr}");
    let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
    rt.block_on(icseg_service::serve(state, addr))
        .map_err(|e| runtime(format!("serving on {addr}: {e}")))
}

pub(crate) fn ablate(a: &AblateArgs, overrides: &Overrides, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let mut run = Run::start("ablate", &a.common, overrides)?;
    if a.frames.as_ref().is_some_and(|f| f.is_empty() || f.contains(&0)) {
        return Err(CliError::Config("--frames entries must be positive".into()));
    }
    let model = run.model_or_untrained(a.checkpoint.as_deref(), stderr)?;
    let seed = run.seed();
    let d = run.config.data;
    let videos = generate_videos(&d.shape_spec(), d.n_videos, d.video_frames, split_seeds(seed).2).map_err(runtime)?;
    let (do_ensembles, frames) = match (&a.frames, a.ensembles) {
        (None, false) => (true, Some(FRAME_GRID.to_vec())),
        (f, e) => (e, f.clone()),
    };
    let mut metrics = serde_json::Map::new();
    if do_ensembles {
        let bench = CategoryBenchmark::synthetic(&d, seed).map_err(runtime)?;
        let rows = strategy_table(&model, &bench, &videos, &STRATEGY_GRID, seed).map_err(runtime)?;
        let csv = strategy_csv(&rows);
        write!(stdout, "{csv}").map_err(runtime)?;
        if let Some(out) = &a.out {
            write_atomic(&out.join("ensembles.csv"), csv.as_bytes()).map_err(runtime)?;
        }
        metrics.insert("ensembles".into(), json!(rows));
    }
    if let Some(frames) = frames {
        if do_ensembles {
            writeln!(stdout).map_err(runtime)?;
        }
        let rows = frame_table(&model, &videos, &frames, seed).map_err(runtime)?;
        let csv = frame_csv(&rows);
        write!(stdout, "{csv}").map_err(runtime)?;
        if let Some(out) = &a.out {
            write_atomic(&out.join("frames.csv"), csv.as_bytes()).map_err(runtime)?;
        }
        metrics.insert("frames".into(), json!(rows));
    }
    run.finish(&a.common, a.out.as_deref(), serde_json::Value::Object(metrics))
}
