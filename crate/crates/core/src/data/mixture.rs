use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{augment, sample_context_partner, AugmentConfig, DataError, LabeledSample};
use crate::palette::{build_canvas, mix_context, recolor, Canvas, IdSelection, InContextPair, MixConfig, PaletteError};
use crate::rng::{derive_seed, seeded, Rng as SeededRng};
use crate::segmap::TaskKind;

/// A named pool of samples annotated at one granularity.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub tag: String,
    pub kind: TaskKind,
    pub samples: Vec<LabeledSample>,
}

/// Dataset weights plus the probability of using a transformed view as the
/// partner for category-level data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: Vec<(String, f64)>,
    pub p_view: f64,
}

impl MixtureSpec {
    /// Validated spec; weights must already sum to one.
    pub fn new(weights: Vec<(String, f64)>, p_view: f64) -> Result<Self, DataError> {
        let spec = Self { weights, p_view };
        spec.validate()?;
        Ok(spec)
    }

    /// Rescales nonnegative weights to sum to one before validating.
    pub fn normalized(weights: Vec<(String, f64)>, p_view: f64) -> Result<Self, DataError> {
        let total: f64 = weights.iter().map(|(_, w)| *w).sum();
        if !(total > 0.0) || weights.iter().any(|(_, w)| *w < 0.0 || !w.is_finite()) {
            return Err(DataError::BadSpec("weights must be nonnegative with a positive sum".into()));
        }
        Self::new(weights.into_iter().map(|(t, w)| (t, w / total)).collect(), p_view)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.weights.is_empty() {
            return Err(DataError::BadSpec("no datasets in mixture".into()));
        }
        if self.weights.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(DataError::BadSpec("weights must be finite and nonnegative".into()));
        }
        let total: f64 = self.weights.iter().map(|(_, w)| *w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::BadSpec(format!("weights sum to {total}, expected 1")));
        }
        if !(0.0..=1.0).contains(&self.p_view) {
            return Err(DataError::BadSpec(format!("p_view {} outside [0, 1]", self.p_view)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub mask_ratio: f64,
    pub patch: u32,
    pub selection: IdSelection,
    pub augment: AugmentConfig,
    pub mix: MixConfig,
    /// Probability of replacing both halves of a pair by mixed-context samples.
    pub p_mix: f64,
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            patch: 8,
            selection: IdSelection::default(),
            augment: AugmentConfig::default(),
            mix: MixConfig::default(),
            p_mix: 0.3,
            max_retries: 16,
        }
    }
}

/// One training draw.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub canvas: Canvas,
    pub kind: TaskKind,
    pub pair: InContextPair,
    pub dataset: usize,
}

/// Endless stream of training canvases drawn from a weighted dataset mixture.
pub struct MixtureSampler {
    spec: MixtureSpec,
    datasets: Arc<Vec<Dataset>>,
    /// `spec.weights[i]` refers to `datasets[resolved[i]]`.
    resolved: Vec<usize>,
    chooser: WeightedIndex<f64>,
    cfg: SamplerConfig,
    rng: SeededRng,
}

impl MixtureSampler {
    pub fn new(spec: MixtureSpec, datasets: Arc<Vec<Dataset>>, cfg: SamplerConfig, seed: u64) -> Result<Self, DataError> {
        spec.validate()?;
        let resolved = spec
            .weights
            .iter()
            .map(|(tag, _)| {
                datasets
                    .iter()
                    .position(|d| &d.tag == tag)
                    .ok_or_else(|| DataError::UnknownTag(tag.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if resolved.iter().any(|&i| datasets[i].samples.is_empty()) {
            return Err(DataError::EmptyPool);
        }
        let chooser = WeightedIndex::new(spec.weights.iter().map(|(_, w)| *w)).map_err(|e| DataError::BadSpec(e.to_string()))?;
        Ok(Self {
            spec,
            datasets,
            resolved,
            chooser,
            cfg,
            rng: seeded(seed),
        })
    }

    /// Index into the dataset list for the next draw.
    pub fn choose_dataset(&mut self) -> usize {
        self.resolved[self.chooser.sample(&mut self.rng)]
    }

    pub fn draw(&mut self) -> Result<TrainingExample, DataError> {
        let d = self.choose_dataset();
        for _ in 0..self.cfg.max_retries {
            match self.try_draw(d) {
                Ok(ex) => return Ok(ex),
                Err(DataError::Palette(PaletteError::EmptyIds)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(DataError::Exhausted(self.cfg.max_retries))
    }

    fn try_draw(&mut self, d: usize) -> Result<TrainingExample, DataError> {
        let datasets = Arc::clone(&self.datasets);
        let dataset = &datasets[d];
        let rng = &mut self.rng;
        let anchor = &dataset.samples[rng.random_range(0..dataset.samples.len())];
        let partner = sample_context_partner(
            &dataset.samples,
            anchor,
            dataset.kind,
            self.spec.p_view,
            &self.cfg.augment,
            true,
            rng,
        )?;
        let query = augment(anchor, &self.cfg.augment, rng);
        let mut pair = crate::palette::make_incontext_pair(&partner, &query, dataset.kind, &self.cfg.selection, rng)?;
        if rng.random_bool(self.cfg.p_mix.clamp(0.0, 1.0)) {
            mix_pair(&mut pair, &partner, &query, &self.cfg.mix, rng)?;
        }
        let canvas = build_canvas(&pair, self.cfg.mask_ratio, self.cfg.patch, rng)?;
        Ok(TrainingExample {
            canvas,
            kind: dataset.kind,
            pair,
            dataset: d,
        })
    }
}

/// Replaces each half of the pair by a mixed-context sample stitched from
/// both halves under the pair's palette, with independent crops.
fn mix_pair<R: Rng + ?Sized>(
    pair: &mut InContextPair,
    example: &LabeledSample,
    query: &LabeledSample,
    mix: &MixConfig,
    rng: &mut R,
) -> Result<(), DataError> {
    let keep = pair.palette.ids().collect();
    let ex = (example.source.clone(), example.segment_map(pair.kind).retain(&keep));
    let q = (query.source.clone(), query.segment_map(pair.kind).retain(&keep));
    let cfg = MixConfig {
        out_size: example.source.width(),
        ..*mix
    };
    let mixed_ex = mix_context(&[ex.clone(), q.clone()], &pair.palette, cfg, rng)?;
    let mixed_q = mix_context(&[q, ex], &pair.palette, cfg, rng)?;
    pair.example_source = mixed_ex.source;
    pair.example_target = mixed_ex.target;
    pair.query_source = mixed_q.source;
    pair.query_target = Some(recolor(&mixed_q.map, &pair.palette)?);
    pair.query_map = Some(mixed_q.map);
    Ok(())
}

impl Iterator for MixtureSampler {
    type Item = Result<TrainingExample, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.draw())
    }
}

/// Several samplers on worker threads, each seeded from `(base_seed,
/// worker_id)`, merged round-robin so the stream is reproducible.
pub struct ParallelSampler {
    receivers: Vec<Receiver<Result<TrainingExample, DataError>>>,
    handles: Vec<JoinHandle<()>>,
    next: usize,
}

impl ParallelSampler {
    pub fn spawn(
        spec: MixtureSpec,
        datasets: Arc<Vec<Dataset>>,
        cfg: SamplerConfig,
        base_seed: u64,
        workers: usize,
        capacity: usize,
    ) -> Result<Self, DataError> {
        let mut receivers = Vec::new();
        let mut handles = Vec::new();
        for worker in 0..workers.max(1) {
            let mut sampler = MixtureSampler::new(
                spec.clone(),
                Arc::clone(&datasets),
                cfg.clone(),
                derive_seed(base_seed, worker as u64),
            )?;
            let (tx, rx) = sync_channel(capacity.max(1));
            handles.push(std::thread::spawn(move || while tx.send(sampler.draw()).is_ok() {}));
            receivers.push(rx);
        }
        Ok(Self {
            receivers,
            handles,
            next: 0,
        })
    }

    pub fn recv(&mut self) -> Result<TrainingExample, DataError> {
        let rx = &self.receivers[self.next];
        self.next = (self.next + 1) % self.receivers.len();
        rx.recv().expect("sampler worker exited")
    }
}

impl Iterator for ParallelSampler {
    type Item = Result<TrainingExample, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.recv())
    }
}

impl Drop for ParallelSampler {
    fn drop(&mut self) {
        self.receivers.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_shapes_sample, ShapeSpec};

    fn datasets() -> Arc<Vec<Dataset>> {
        let spec = ShapeSpec::default();
        let mk = |tag: &str, kind, seed0: u64| Dataset {
            tag: tag.into(),
            kind,
            samples: (0..12)
                .map(|i| {
                    let mut s = gen_shapes_sample(&spec, &mut seeded(seed0 + i)).unwrap();
                    s.dataset_tag = tag.into();
                    s
                })
                .collect(),
        };
        Arc::new(vec![
            mk("a", TaskKind::Instance, 0),
            mk("b", TaskKind::Category, 100),
            mk("c", TaskKind::Category, 200),
        ])
    }

    #[test]
    fn single_weight_draws_only_that_dataset() {
        let spec = MixtureSpec::new(vec![("b".into(), 1.0)], 0.5).unwrap();
        let mut s = MixtureSampler::new(spec, datasets(), SamplerConfig::default(), 1).unwrap();
        for _ in 0..30 {
            let ex = s.draw().unwrap();
            assert_eq!(ex.dataset, 1);
            assert_eq!(ex.kind, TaskKind::Category);
        }
    }

    #[test]
    fn frequencies_match_weights() {
        let weights = [("a", 0.5), ("b", 0.3), ("c", 0.2)];
        let spec = MixtureSpec::new(weights.iter().map(|(t, w)| (t.to_string(), *w)).collect(), 0.5).unwrap();
        let mut s = MixtureSampler::new(spec, datasets(), SamplerConfig::default(), 7).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[s.choose_dataset()] += 1;
        }
        for (i, (_, w)) in weights.iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - w).abs() < 0.01, "dataset {i}: {freq} vs {w}");
            // 3σ multinomial band
            let sigma = (w * (1.0 - w) / n as f64).sqrt();
            assert!((freq - w).abs() < 3.0 * sigma + 1e-12, "dataset {i} outside 3σ");
        }
    }

    #[test]
    fn appendix_style_weights_validate_after_normalizing() {
        let raw = [0.22, 0.15, 0.15, 0.07, 0.07, 0.07, 0.07, 0.07, 0.06, 0.06];
        let weights: Vec<(String, f64)> = raw.iter().enumerate().map(|(i, &w)| (format!("d{i}"), w)).collect();
        // The listed weights add up to 0.99.
        assert!(MixtureSpec::new(weights.clone(), 0.5).is_err());
        let spec = MixtureSpec::normalized(weights, 0.5).unwrap();
        let total: f64 = spec.weights.iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((spec.weights[0].1 - 0.22 / 0.99).abs() < 1e-12);
    }

    #[test]
    fn bad_specs() {
        assert!(MixtureSpec::new(vec![("a".into(), 0.7)], 0.5).is_err());
        assert!(MixtureSpec::new(vec![("a".into(), 1.0)], 1.5).is_err());
        let spec = MixtureSpec::new(vec![("zzz".into(), 1.0)], 0.5).unwrap();
        assert!(matches!(
            MixtureSampler::new(spec, datasets(), SamplerConfig::default(), 0),
            Err(DataError::UnknownTag(_))
        ));
    }

    #[test]
    fn draws_are_deterministic() {
        let spec = MixtureSpec::new(vec![("a".into(), 0.5), ("b".into(), 0.5)], 0.5).unwrap();
        let mut s1 = MixtureSampler::new(spec.clone(), datasets(), SamplerConfig::default(), 3).unwrap();
        let mut s2 = MixtureSampler::new(spec, datasets(), SamplerConfig::default(), 3).unwrap();
        for _ in 0..10 {
            assert_eq!(s1.draw().unwrap().canvas, s2.draw().unwrap().canvas);
        }
    }

    #[test]
    fn parallel_stream_is_reproducible() {
        let spec = MixtureSpec::new(vec![("a".into(), 0.5), ("c".into(), 0.5)], 0.5).unwrap();
        let take = |seed| {
            let mut p = ParallelSampler::spawn(spec.clone(), datasets(), SamplerConfig::default(), seed, 3, 2).unwrap();
            (0..9).map(|_| p.recv().unwrap().canvas).collect::<Vec<_>>()
        };
        assert_eq!(take(5), take(5));
    }
}
