//! Two-pass generation: a vanilla pass that caches layout embeddings, then the
//! consistency pass with mask extraction, attention sharing, harmonization
//! and layout interpolation.

use rayon::prelude::*;

use crate::attention::{
    cross_image_attention, drop_cross_entries, self_attention, subset_attention, BatchQkv, SharingDropout,
};
use crate::bli::{interpolate, BliSchedule, EmbeddingCache};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::masking::{
    aggregate_subject_maps, binarize, build_propagation_mask, dropout_mask, AttentionMap, PropagationMask,
    SubjectMask,
};
use crate::metrics::MetricReport;
use crate::rfh::{correspond, harmonize, CorrespondenceTable};
use crate::rng::{tags, SplitMix64};

use super::config::RunConfig;
use super::model::ToyDenoiser;
use super::scene::Scene;

/// Where in the run a hook fires.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepContext {
    pub t: usize,
    pub layer: usize,
    pub vanilla: bool,
}

pub type HookResult = std::result::Result<(), String>;

/// Read-only taps into a run. A returned error aborts the run with the
/// timestep and layer attached.
#[allow(unused_variables)]
pub trait Observer: Send {
    /// Subject maps of every image (`maps[i][s]`) after prompt cross-attention.
    fn on_cross_attention(&mut self, ctx: &StepContext, maps: &[Vec<AttentionMap<f64>>]) -> HookResult {
        Ok(())
    }

    /// Full-batch sharing: the batch, the effective propagation masks (after
    /// dropout), the gating masks they were built from, and the outputs.
    fn on_shared_attention(
        &mut self,
        ctx: &StepContext,
        batch: &BatchQkv<f64>,
        gammas: &[PropagationMask],
        masks: &[SubjectMask],
        outputs: &[Matrix<f64>],
    ) -> HookResult {
        Ok(())
    }

    fn on_harmonize(
        &mut self,
        ctx: &StepContext,
        before: &[Matrix<f64>],
        after: &[Matrix<f64>],
        table: &CorrespondenceTable<f64>,
    ) -> HookResult {
        Ok(())
    }

    /// Embeddings of every image at the end of a block.
    fn on_block_end(&mut self, ctx: &StepContext, state: &[Matrix<f64>]) -> HookResult {
        Ok(())
    }
}

pub struct NoopObserver;

impl Observer for NoopObserver {}

pub enum Mode<'a> {
    /// Plain self-attention; records layout embeddings when given a cache.
    Vanilla(Option<&'a mut EmbeddingCache<f64>>),
    /// Consistency mechanisms per the config toggles; the cache is required
    /// when layout interpolation is on.
    Consistent(Option<&'a EmbeddingCache<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCorrespondence {
    pub t: usize,
    pub layer: usize,
    pub table: CorrespondenceTable<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub state: Vec<Matrix<f64>>,
    /// Masks from this timestep's maps over the configured mask layers.
    pub masks: Vec<SubjectMask>,
    pub correspondences: Vec<LayerCorrespondence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PassOutput {
    pub final_embeddings: Vec<Matrix<f64>>,
    /// `masks[t][i]`.
    pub masks: Vec<Vec<SubjectMask>>,
    pub correspondences: Vec<LayerCorrespondence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub config: RunConfig,
    pub final_embeddings: Vec<Matrix<f64>>,
    /// `masks[t][i]` of the consistency pass.
    pub masks: Vec<Vec<SubjectMask>>,
    pub correspondences: Vec<LayerCorrespondence>,
    pub planted: Vec<SubjectMask>,
    pub metrics: MetricReport,
    /// Final embeddings of the vanilla pass, when it ran.
    pub vanilla_final: Option<Vec<Matrix<f64>>>,
    pub cache: Option<EmbeddingCache<f64>>,
}

impl RunResult {
    pub fn final_masks(&self) -> &[SubjectMask] {
        self.masks.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Worker count; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Pass-1 cache to reuse instead of running the vanilla pass.
    pub cache: Option<EmbeddingCache<f64>>,
    pub observer: Option<&'a mut dyn Observer>,
}

fn hook(ctx: &StepContext, r: HookResult) -> Result<()> {
    r.map_err(|detail| Error::Hook {
        t: ctx.t,
        layer: ctx.layer,
        detail,
    })
}

/// Attaches module and position to numerical failures.
fn located<T>(module: &'static str, ctx: &StepContext, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Shape(_) | Error::NonFinite(_) | Error::DegenerateRow { .. } | Error::DegenerateVector => {
            Error::Invariant {
                module,
                t: ctx.t,
                layer: ctx.layer,
                detail: e.to_string(),
            }
        }
        other => other,
    })
}

fn keyed(seed: u64, purpose: u64, t: usize, layer: usize, image: usize) -> SplitMix64 {
    SplitMix64::keyed(seed, purpose, &[t as u64, layer as u64, image as u64])
}

/// Configured model, scene and schedules for one seed.
#[derive(Clone, Debug)]
pub struct Engine {
    pub config: RunConfig,
    pub model: ToyDenoiser,
    pub scene: Scene,
    pub schedule: BliSchedule<f64>,
    mask_layers: Vec<usize>,
    rfh_layers: Vec<usize>,
}

impl Engine {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model: ToyDenoiser::new(config)?,
            scene: Scene::generate(config)?,
            schedule: BliSchedule::new(
                config.lambda,
                config.bli_window_fraction,
                config.num_timesteps,
                config.bli_layer_set(),
            )?,
            mask_layers: config.mask_layer_set(),
            rfh_layers: config.rfh_layer_set(),
            config: config.clone(),
        })
    }

    pub fn initial_state(&self) -> Vec<Matrix<f64>> {
        self.scene.initial.clone()
    }

    fn extract_masks(&self, per_image: &[Vec<Vec<AttentionMap<f64>>>]) -> Result<Vec<SubjectMask>> {
        per_image
            .iter()
            .map(|layers| binarize(&aggregate_subject_maps(layers)?, self.config.threshold, self.config.grid()))
            .collect()
    }

    /// Masks gating sharing and harmonization at this block: extracted from the
    /// maps of this timestep so far (all ones with masks toggled off), then
    /// mask dropout.
    fn gating_masks(
        &self,
        ctx: &StepContext,
        so_far: &[Vec<Vec<AttentionMap<f64>>>],
        current: &[Vec<AttentionMap<f64>>],
    ) -> Result<Vec<SubjectMask>> {
        let c = &self.config;
        let p = c.patches();
        let base = if c.toggles.masks {
            let inputs: Vec<Vec<Vec<AttentionMap<f64>>>> = so_far
                .iter()
                .zip(current)
                .map(|(layers, cur)| {
                    if layers.is_empty() {
                        vec![cur.clone()]
                    } else {
                        layers.clone()
                    }
                })
                .collect();
            self.extract_masks(&inputs)?
        } else {
            (0..c.num_images).map(|i| SubjectMask::full(i, p)).collect()
        };
        if !(c.toggles.dropouts && c.mask_dropout > 0.0) {
            return Ok(base);
        }
        base.iter()
            .enumerate()
            .map(|(i, m)| {
                let mut rng = keyed(c.seed, tags::MASK_DROPOUT, ctx.t, ctx.layer, i);
                dropout_mask(m, c.mask_dropout, &mut rng)
            })
            .collect()
    }

    /// One timestep: every block of the denoiser over the whole batch.
    pub fn denoise_step(
        &self,
        state: &[Matrix<f64>],
        t: usize,
        mode: &mut Mode<'_>,
        observer: &mut dyn Observer,
    ) -> Result<StepOutput> {
        let c = &self.config;
        let n = c.num_images;
        let expected = (c.patches(), c.embed_dim);
        if state.len() != n || state.iter().any(|x| x.shape() != expected) {
            return Err(Error::shape(format!("state does not match {n} images of {expected:?}")));
        }
        let vanilla = matches!(mode, Mode::Vanilla(_));
        let toggles = c.toggles;
        let mut x: Vec<Matrix<f64>> = state.to_vec();
        let mut maps_so_far: Vec<Vec<Vec<AttentionMap<f64>>>> = vec![Vec::new(); n];
        let mut correspondences = Vec::new();

        for layer in 0..c.num_blocks {
            let ctx = StepContext { t, layer, vanilla };

            let crossed = located(
                "masking",
                &ctx,
                x.par_iter()
                    .enumerate()
                    .map(|(i, xi)| {
                        let prompt = &self.scene.prompts[i];
                        self.model.cross_attention(layer, i, xi, &prompt.tokens, prompt.subjects)
                    })
                    .collect::<Result<Vec<_>>>(),
            )?;
            let mut current = Vec::with_capacity(n);
            for (i, out) in crossed.into_iter().enumerate() {
                x[i] = out.x;
                current.push(out.maps);
            }
            hook(&ctx, observer.on_cross_attention(&ctx, &current))?;
            let is_mask_layer = self.mask_layers.contains(&layer);

            let interpolating = self.schedule.applies(t, layer);
            let x_in: Vec<Matrix<f64>> = match mode {
                Mode::Vanilla(cache) => {
                    if let Some(cache) = cache.as_deref_mut() {
                        if interpolating {
                            for (i, xi) in x.iter().enumerate() {
                                cache.record(t, layer, i, xi.clone())?;
                            }
                        }
                    }
                    std::mem::take(&mut x)
                }
                Mode::Consistent(cache) if toggles.bli && interpolating => {
                    let cache = cache.ok_or_else(|| Error::config("layout interpolation needs the vanilla cache"))?;
                    x.iter()
                        .enumerate()
                        .map(|(i, xi)| located("bli", &ctx, interpolate(xi, cache.fetch(t, layer, i)?, c.lambda)))
                        .collect::<Result<Vec<_>>>()?
                }
                Mode::Consistent(_) => std::mem::take(&mut x),
            };

            let qkv = located(
                "attention",
                &ctx,
                x_in.par_iter().map(|xi| self.model.project(layer, xi)).collect::<Result<Vec<_>>>(),
            )?;
            let heads = c.num_heads;
            let sharing = !vanilla && toggles.sharing && n >= 2;
            let harmonizing = !vanilla && toggles.rfh && n >= 2 && self.rfh_layers.contains(&layer);

            let masks = if sharing || harmonizing {
                let so_far: Vec<Vec<Vec<AttentionMap<f64>>>> = if is_mask_layer {
                    maps_so_far
                        .iter()
                        .zip(&current)
                        .map(|(done, cur)| {
                            let mut all = done.clone();
                            all.push(cur.clone());
                            all
                        })
                        .collect()
                } else {
                    maps_so_far.clone()
                };
                Some(located("masking", &ctx, self.gating_masks(&ctx, &so_far, &current))?)
            } else {
                None
            };
            if is_mask_layer {
                for (done, cur) in maps_so_far.iter_mut().zip(current) {
                    done.push(cur);
                }
            }

            let mut h = match &masks {
                Some(masks) if sharing => {
                    let batch = BatchQkv::new(qkv, heads)?;
                    let dropping = toggles.dropouts && c.attn_dropout > 0.0;
                    let mut streams: Vec<SplitMix64> = (0..n)
                        .map(|i| keyed(c.seed, tags::ATTN_DROPOUT, t, layer, i))
                        .collect();
                    if c.subset.is_empty() {
                        let mut gammas = (0..n)
                            .map(|i| build_propagation_mask(i, masks))
                            .collect::<Result<Vec<_>>>()?;
                        if dropping {
                            gammas = gammas
                                .iter()
                                .zip(streams.iter_mut())
                                .map(|(g, rng)| drop_cross_entries(g, c.attn_dropout, rng))
                                .collect::<Result<Vec<_>>>()?;
                        }
                        let out = located("attention", &ctx, cross_image_attention(&batch, &gammas, None))?;
                        hook(&ctx, observer.on_shared_attention(&ctx, &batch, &gammas, masks, &out))?;
                        out
                    } else {
                        let dropout = dropping.then(|| SharingDropout {
                            rate: c.attn_dropout,
                            streams: &mut streams,
                        });
                        located("attention", &ctx, subset_attention(&batch, &c.subset, masks, dropout))?
                    }
                }
                _ => located(
                    "attention",
                    &ctx,
                    qkv.par_iter()
                        .map(|p| self_attention(&p.q, &p.k, &p.v, heads))
                        .collect::<Result<Vec<_>>>(),
                )?,
            };

            if let (true, Some(masks)) = (harmonizing, &masks) {
                let refs = (!c.subset.is_empty()).then_some(c.subset.as_slice());
                let table = located("rfh", &ctx, correspond(&h, masks, c.tau, refs))?;
                let dropping = toggles.dropouts && c.rfh_dropout > 0.0;
                let after = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let mut rng = keyed(c.seed, tags::RFH_DROPOUT, t, layer, i);
                        let dropout = dropping.then_some((c.rfh_dropout, &mut rng));
                        harmonize(i, &h, &table, c.gamma, &masks[i], dropout)
                    })
                    .collect::<Result<Vec<_>>>();
                let after = located("rfh", &ctx, after)?;
                hook(&ctx, observer.on_harmonize(&ctx, &h, &after, &table))?;
                h = after;
                correspondences.push(LayerCorrespondence { t, layer, table });
            }

            x = located(
                "pipeline",
                &ctx,
                x_in.par_iter()
                    .zip(&h)
                    .map(|(xi, hi)| self.model.residual(layer, xi, hi))
                    .collect::<Result<Vec<_>>>(),
            )?;
            hook(&ctx, observer.on_block_end(&ctx, &x))?;
        }

        let ctx = StepContext {
            t,
            layer: c.num_blocks - 1,
            vanilla,
        };
        let masks = located("masking", &ctx, self.extract_masks(&maps_so_far))?;
        Ok(StepOutput {
            state: x,
            masks,
            correspondences,
        })
    }

    /// Runs every timestep from the initial scene.
    pub fn run_pass(&self, mut mode: Mode<'_>, observer: &mut dyn Observer) -> Result<PassOutput> {
        let mut state = self.initial_state();
        let mut masks = Vec::with_capacity(self.config.num_timesteps);
        let mut correspondences = Vec::new();
        for t in 0..self.config.num_timesteps {
            let step = self.denoise_step(&state, t, &mut mode, observer)?;
            state = step.state;
            masks.push(step.masks);
            correspondences.extend(step.correspondences);
        }
        Ok(PassOutput {
            final_embeddings: state,
            masks,
            correspondences,
        })
    }

    /// Pass 1: vanilla generation, caching layout embeddings.
    pub fn vanilla_pass(&self, observer: &mut dyn Observer) -> Result<(PassOutput, EmbeddingCache<f64>)> {
        let mut cache = EmbeddingCache::new();
        let out = self.run_pass(Mode::Vanilla(Some(&mut cache)), observer)?;
        Ok((out, cache))
    }

    pub fn run(&self, options: RunOptions<'_>) -> Result<RunResult> {
        let RunOptions {
            threads,
            cache,
            observer,
        } = options;
        let mut noop = NoopObserver;
        let observer: &mut dyn Observer = match observer {
            Some(o) => o,
            None => &mut noop,
        };
        match threads {
            None => self.run_inner(cache, observer),
            Some(k) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(k.max(1))
                    .build()
                    .map_err(|e| Error::config(format!("thread pool: {e}")))?;
                pool.install(|| self.run_inner(cache, observer))
            }
        }
    }

    fn run_inner(&self, cache: Option<EmbeddingCache<f64>>, observer: &mut dyn Observer) -> Result<RunResult> {
        let c = &self.config;
        let (vanilla_final, cache) = match cache {
            Some(cache) => {
                cache.verify_complete(&self.schedule, c.num_images, (c.patches(), c.embed_dim))?;
                (None, Some(cache))
            }
            None if c.toggles.bli => {
                let (out, cache) = self.vanilla_pass(observer)?;
                (Some(out.final_embeddings), Some(cache))
            }
            None => (None, None),
        };
        let pass = self.run_pass(Mode::Consistent(cache.as_ref()), observer)?;
        let final_masks = pass.masks.last().cloned().unwrap_or_default();
        let metrics = MetricReport::compute(&pass.final_embeddings, &final_masks, &self.scene.planted);
        Ok(RunResult {
            config: c.clone(),
            final_embeddings: pass.final_embeddings,
            masks: pass.masks,
            correspondences: pass.correspondences,
            planted: self.scene.planted.clone(),
            metrics,
            vanilla_final,
            cache,
        })
    }
}

/// Both passes with default options.
pub fn run(config: &RunConfig) -> Result<RunResult> {
    Engine::new(config)?.run(RunOptions::default())
}

pub fn run_with(config: &RunConfig, options: RunOptions<'_>) -> Result<RunResult> {
    Engine::new(config)?.run(options)
}
