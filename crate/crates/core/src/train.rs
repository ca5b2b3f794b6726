//! Denoising score matching, CFG dropout, EMA tracking and the multi-stage
//! training loop.
//!
//! All randomness of a training step comes from a stream keyed by
//! `(seed, stage, step)`, and batches from per-epoch streams, so a run
//! restored from a checkpoint continues bit-exactly.

use std::collections::HashMap;

use microdiff_nn::{clip_grad_norm, Adam, AdamState, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::checkpoint::Checkpoint;
use crate::data::{
    generate_buckets_with_fill, make_batch_schedule, prepare_pixels, Batch, BucketSet, DatasetManifest,
    DEFAULT_MIN_FILL,
};
use crate::denoiser::{CondBatch, Denoiser, DenoiserConfig};
use crate::rng::stream;
use crate::schedule::{draw_epsilon, NoiseSchedule, ScheduleConfig};
use crate::textenc::{TextContext, TextEncoder, TextEncoderConfig};
use crate::{Error, Result};

const TAG_INIT: u64 = 1;
const TAG_TEXT: u64 = 2;
const TAG_EPOCH: u64 = 3;
const TAG_STEP: u64 = 4;

/// A denoiser whose forward pass can be recorded for differentiation.
pub trait GraphDenoiser {
    fn forward_graph(&self, g: &mut Graph<'_>, x: Var, sigmas: &[f64], cond: &CondBatch) -> Result<Var>;
}

impl GraphDenoiser for Denoiser {
    fn forward_graph(&self, g: &mut Graph<'_>, x: Var, sigmas: &[f64], cond: &CondBatch) -> Result<Var> {
        self.forward(g, x, sigmas, cond)
    }
}

/// Clean data with its conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// `[n, c, h, w]`
    pub x0: Tensor,
    pub cond: CondBatch,
}

/// Uniform level indices in `[0, max_level)`.
pub fn draw_levels<R: Rng + ?Sized>(n: usize, max_level: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..max_level)).collect()
}

/// Records `mean_i lambda_i ||D(x0_i + sigma_i eps_i) - x0_i||^2` on `g`.
pub fn dsm_loss_graph<M: GraphDenoiser + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph<'_>,
    model: &M,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    levels: &[usize],
    offset_level: f64,
    rng: &mut R,
) -> Result<Var> {
    let n = batch.x0.dim(0);
    if levels.len() != n || batch.cond.len() != n {
        return Err(Error::shape(format!(
            "batch of {n} with {} levels and {} conditions",
            levels.len(),
            batch.cond.len()
        )));
    }
    if !(offset_level >= 0.0) {
        return Err(Error::invalid(format!("offset_level must be >= 0, got {offset_level}")));
    }
    let sigmas = levels.iter().map(|&l| schedule.sigma(l)).collect::<Result<Vec<_>>>()?;
    let weights = levels.iter().map(|&l| schedule.loss_weight(l)).collect::<Result<Vec<_>>>()?;
    let eps = draw_epsilon(batch.x0.shape(), offset_level, rng);
    let len = batch.x0.item_len();
    let mut x_t = batch.x0.clone();
    for (i, s) in sigmas.iter().enumerate() {
        let e = &eps.data()[i * len..(i + 1) * len];
        x_t.data_mut()[i * len..(i + 1) * len]
            .iter_mut()
            .zip(e)
            .for_each(|(x, e)| *x += s * e);
    }
    let x = g.constant(x_t);
    let pred = model.forward_graph(g, x, &sigmas, &batch.cond)?;
    Ok(g.weighted_sq_err(pred, batch.x0.clone(), weights))
}

/// Scalar DSM loss with levels drawn uniformly over the schedule.
pub fn dsm_loss<M: GraphDenoiser + ?Sized, R: Rng + ?Sized>(
    model: &M,
    params: &ParamStore,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    offset_level: f64,
    rng: &mut R,
) -> Result<f64> {
    let levels = draw_levels(batch.x0.dim(0), schedule.num_levels(), rng);
    let mut g = Graph::new(params);
    let loss = dsm_loss_graph(&mut g, model, batch, schedule, &levels, offset_level, rng)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: "DSM loss".into(),
        });
    }
    Ok(value)
}

/// With probability `p` the null context, otherwise `context`. One uniform
/// is drawn per call whatever `p` is.
pub fn cfg_dropout<R: Rng + ?Sized>(context: &TextContext, null: &TextContext, p: f64, rng: &mut R) -> Result<TextContext> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must be in [0, 1], got {p}")));
    }
    let u: f64 = rng.gen();
    Ok(if u < p { null.clone() } else { context.clone() })
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    if !ema.same_layout(params) {
        return Err(Error::shape("EMA and model parameters differ in layout"));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("EMA decay must be in [0, 1], got {decay}")));
    }
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        e.data_mut()
            .iter_mut()
            .zip(p.data())
            .for_each(|(e, p)| *e = decay * *e + (1.0 - decay) * p);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    pub target_area: u64,
    pub step: u32,
    pub min_side: u32,
    pub max_side: u32,
    #[serde(default = "default_min_fill")]
    pub min_fill: f64,
}

fn default_min_fill() -> f64 {
    DEFAULT_MIN_FILL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: String,
    pub steps: usize,
    pub batch_size: usize,
    /// Fixed `(h, w)` training resolution.
    #[serde(default)]
    pub resolution: Option<(u32, u32)>,
    /// Multi-aspect bucketing; takes precedence over `resolution`.
    #[serde(default)]
    pub buckets: Option<BucketSpec>,
    #[serde(default)]
    pub offset_level: f64,
    #[serde(default = "default_dropout")]
    pub cfg_dropout_p: f64,
    /// Train only on levels below this index (refiner specialisation).
    #[serde(default)]
    pub max_level: Option<usize>,
}

fn default_dropout() -> f64 {
    0.1
}

impl StageConfig {
    pub fn bucket_set(&self) -> Result<BucketSet> {
        match (&self.buckets, self.resolution) {
            (Some(b), _) => generate_buckets_with_fill(b.target_area, b.step, b.min_side, b.max_side, b.min_fill),
            (None, Some((h, w))) if h > 0 && w > 0 => Ok(BucketSet::single(h, w)),
            _ => Err(Error::invalid(format!("stage {:?} needs a resolution or buckets", self.name))),
        }
    }

    fn validate(&self, num_levels: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid(format!("stage {:?}: batch_size must be >= 1", self.name)));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout_p) || !(self.offset_level >= 0.0) {
            return Err(Error::invalid(format!(
                "stage {:?}: cfg_dropout_p must be in [0, 1] and offset_level >= 0",
                self.name
            )));
        }
        if matches!(self.max_level, Some(m) if m == 0 || m > num_levels) {
            return Err(Error::invalid(format!("stage {:?}: max_level outside 1..={num_levels}", self.name)));
        }
        self.bucket_set().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Drop manifest entries whose shorter original side is below this.
    #[serde(default)]
    pub discard_below: Option<u32>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub text: TextEncoderConfig,
    pub stages: Vec<StageConfig>,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_ema() -> f64 {
    0.9999
}

impl TrainConfig {
    /// Three stages: 2k steps at 32x32, 1k at 64x64, 1k multi-aspect at
    /// about 64x64 area.
    pub fn desk_default(seed: u64) -> Self {
        let text = TextEncoderConfig::default();
        let stage = |name: &str, steps, resolution, buckets, offset_level| StageConfig {
            name: name.into(),
            steps,
            batch_size: 8,
            resolution,
            buckets,
            offset_level,
            cfg_dropout_p: 0.1,
            max_level: None,
        };
        Self {
            seed,
            learning_rate: 1e-4,
            ema_decay: 0.9999,
            grad_clip: Some(1.0),
            discard_below: None,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::sdxl(16, text.context_dim(), text.pooled_dim()),
            text,
            stages: vec![
                stage("pretrain", 2000, Some((32, 32)), None, 0.0),
                stage("continue", 1000, Some((64, 64)), None, 0.0),
                stage(
                    "multi-aspect",
                    1000,
                    None,
                    Some(BucketSpec {
                        target_area: 64 * 64,
                        step: 16,
                        min_side: 32,
                        max_side: 128,
                        min_fill: DEFAULT_MIN_FILL,
                    }),
                    0.05,
                ),
            ],
        }
    }

    /// Single-channel toy preset: 600 steps at 16x16, 200 at 32x32, then 200
    /// multi-aspect steps around 16x16 area. Trains in minutes on a CPU.
    pub fn toy(seed: u64) -> Self {
        let text = TextEncoderConfig {
            max_len: 8,
            dim_a: 16,
            dim_b: 16,
            heads: 2,
            layers: 1,
        };
        let mut denoiser = DenoiserConfig::toy(8, vec![1, 2], vec![0, 1], text.context_dim(), text.pooled_dim());
        denoiser.in_channels = 1;
        denoiser.d_f = 8;
        denoiser.time_fourier_dim = 16;
        denoiser.time_dim = 32;
        denoiser.head_dim = 8;
        let mut cfg = Self::desk_default(seed);
        cfg.learning_rate = 1e-3;
        cfg.ema_decay = 0.999;
        cfg.denoiser = denoiser;
        cfg.text = text;
        let sizes = [(600, Some((16, 16))), (200, Some((32, 32))), (200, None)];
        for (stage, (steps, res)) in cfg.stages.iter_mut().zip(sizes) {
            stage.steps = steps;
            stage.resolution = res;
        }
        cfg.stages[2].buckets = Some(BucketSpec {
            target_area: 16 * 16,
            step: 8,
            min_side: 8,
            max_side: 32,
            min_fill: DEFAULT_MIN_FILL,
        });
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ema_decay) || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("ema_decay must be in [0, 1] and learning_rate > 0"));
        }
        self.denoiser.validate()?;
        if self.denoiser.context_dim != self.text.context_dim() || self.denoiser.pooled_dim != self.text.pooled_dim() {
            return Err(Error::invalid("denoiser context/pooled widths must match the text encoder"));
        }
        let schedule = NoiseSchedule::new(self.schedule.clone())?;
        for s in &self.stages {
            s.validate(schedule.num_levels())?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }
}

/// Decoded training images kept in memory.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub manifest: DatasetManifest,
    pub pixels: Vec<Tensor>,
}

impl TrainData {
    /// Decodes every entry, logging and dropping those that fail.
    pub fn load(manifest: &DatasetManifest) -> Self {
        let mut kept = Vec::new();
        let mut pixels = Vec::new();
        for e in &manifest.entries {
            match e.source.load() {
                Ok(px) if px.rank() == 3 => {
                    kept.push(e.clone());
                    pixels.push(px);
                }
                Ok(px) => log::warn!("skipping {:?}: pixels {:?} not [c, h, w]", e.id, px.shape()),
                Err(err) => log::warn!("skipping {:?}: {err}", e.id),
            }
        }
        Self {
            manifest: DatasetManifest { entries: kept },
            pixels,
        }
    }

    /// Entries whose shorter original side is at least `min_side`.
    pub fn discard_below(&self, min_side: u32) -> Self {
        let keep: Vec<usize> = (0..self.manifest.len())
            .filter(|&i| {
                let e = &self.manifest.entries[i];
                e.h_original.min(e.w_original) >= min_side
            })
            .collect();
        Self {
            manifest: DatasetManifest {
                entries: keep.iter().map(|&i| self.manifest.entries[i].clone()).collect(),
            },
            pixels: keep.iter().map(|&i| self.pixels[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub stage_index: usize,
    pub step: usize,
    pub stage_step: usize,
    pub bucket: (u32, u32),
    pub loss: f64,
    /// Counts of drawn levels in ten equal-width index bins.
    pub level_histogram: Vec<usize>,
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Denoiser,
    pub ema: ParamStore,
    pub adam: AdamState,
    pub text: TextEncoder,
    /// Stage in progress and the steps already taken in it.
    pub stage: usize,
    pub stage_step: usize,
    pub global_step: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    config: TrainConfig,
    stage: usize,
    stage_step: usize,
    global_step: usize,
    adam_step: u64,
    latent: Option<LatentInfo>,
}

/// Latent-space bookkeeping carried in checkpoints so samplers can decode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentInfo {
    pub downsample_factor: usize,
    pub autoencoder_fingerprint: u64,
}

impl TrainState {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Denoiser::new(config.denoiser.clone(), &mut stream(config.seed, &[TAG_INIT]))?;
        let text = TextEncoder::new(config.text.clone(), &mut stream(config.seed, &[TAG_TEXT]))?;
        Ok(Self {
            ema: model.params().clone(),
            adam: AdamState::new(model.params()),
            model,
            text,
            stage: 0,
            stage_step: 0,
            global_step: 0,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig, latent: Option<LatentInfo>) -> Result<Checkpoint> {
        let meta = TrainMeta {
            kind: "denoiser".into(),
            config: config.clone(),
            stage: self.stage,
            stage_step: self.stage_step,
            global_step: self.global_step,
            adam_step: self.adam.step,
            latent,
        };
        let mut ck = Checkpoint::new(&meta)?;
        ck.insert_store("params", self.model.params());
        ck.insert_store("ema", &self.ema);
        ck.insert_store("text", self.text.params());
        let mut m = self.model.params().clone();
        let mut v = self.model.params().clone();
        for (i, t) in m.tensors_mut().iter_mut().enumerate() {
            *t = self.adam.m[i].clone();
        }
        for (i, t) in v.tensors_mut().iter_mut().enumerate() {
            *t = self.adam.v[i].clone();
        }
        ck.insert_store("adam_m", &m);
        ck.insert_store("adam_v", &v);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, Self, Option<LatentInfo>)> {
        let meta: TrainMeta = ck.metadata()?;
        if meta.kind != "denoiser" {
            return Err(Error::format(format!("expected a denoiser checkpoint, got {:?}", meta.kind)));
        }
        let model = Denoiser::from_params(meta.config.denoiser.clone(), ck.store("params")?)?;
        let ema = ck.store("ema")?;
        if !ema.same_layout(model.params()) {
            return Err(Error::format("EMA weights do not match the model"));
        }
        let text = TextEncoder::from_params(meta.config.text.clone(), ck.store("text")?)?;
        let adam = AdamState {
            step: meta.adam_step,
            m: ck.store("adam_m")?.tensors().to_vec(),
            v: ck.store("adam_v")?.tensors().to_vec(),
        };
        let state = Self {
            model,
            ema,
            adam,
            text,
            stage: meta.stage,
            stage_step: meta.stage_step,
            global_step: meta.global_step,
        };
        Ok((meta.config, state, meta.latent))
    }
}

/// Latent information recorded in a denoiser checkpoint, if any.
pub fn checkpoint_latent_info(ck: &Checkpoint) -> Result<Option<LatentInfo>> {
    let meta: TrainMeta = ck.metadata()?;
    Ok(meta.latent)
}

/// Runs the training loop over a prepared dataset.
pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    /// Training data after `discard_below` filtering.
    pub data: TrainData,
    pub schedule: NoiseSchedule,
    /// Frozen autoencoder for latent-space training.
    pub autoencoder: Option<&'a Autoencoder>,
    text_cache: HashMap<String, TextContext>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &'a TrainConfig, data: &TrainData, autoencoder: Option<&'a Autoencoder>) -> Result<Self> {
        config.validate()?;
        let data = match config.discard_below {
            Some(min) => data.discard_below(min),
            None => data.clone(),
        };
        if data.is_empty() {
            return Err(Error::data("no decodable training examples"));
        }
        if let Some(ae) = autoencoder {
            if ae.config().latent_channels != config.denoiser.in_channels {
                return Err(Error::invalid("denoiser in_channels must equal the autoencoder's latent channels"));
            }
        }
        Ok(Self {
            config,
            data,
            schedule: NoiseSchedule::new(config.schedule.clone())?,
            autoencoder,
            text_cache: HashMap::new(),
        })
    }

    pub fn latent_info(&self) -> Option<LatentInfo> {
        self.autoencoder.map(|ae| LatentInfo {
            downsample_factor: ae.config().downsample_factor,
            autoencoder_fingerprint: ae.params().fingerprint(),
        })
    }

    fn context(&mut self, text: &TextEncoder, caption: &str) -> Result<TextContext> {
        if let Some(c) = self.text_cache.get(caption) {
            return Ok(c.clone());
        }
        let c = text.encode_caption(caption)?;
        self.text_cache.insert(caption.to_string(), c.clone());
        Ok(c)
    }

    /// Runs every remaining stage to completion.
    pub fn run(&mut self, state: &mut TrainState, log: &mut dyn FnMut(&LogRecord)) -> Result<()> {
        while state.stage < self.config.stages.len() {
            self.run_stage_until(state, usize::MAX, log)?;
        }
        Ok(())
    }

    /// Advances the current stage until `stop_at` steps of it are done or the
    /// stage ends; in the latter case the state moves to the next stage.
    pub fn run_stage_until(
        &mut self,
        state: &mut TrainState,
        stop_at: usize,
        log: &mut dyn FnMut(&LogRecord),
    ) -> Result<()> {
        let Some(stage) = self.config.stages.get(state.stage).cloned() else {
            return Ok(());
        };
        let buckets = stage.bucket_set()?;
        let factor = self.autoencoder.map_or(1, |ae| ae.config().downsample_factor);
        let multiple = self.config.denoiser.spatial_multiple() * factor;
        if let Some(&(h, w)) = buckets.buckets.iter().find(|(h, w)| *h as usize % multiple != 0 || *w as usize % multiple != 0) {
            return Err(Error::invalid(format!(
                "stage {:?}: bucket {h}x{w} not divisible by {multiple} required by the model",
                stage.name
            )));
        }
        let null = state.text.null_context();
        let max_level = stage.max_level.unwrap_or(self.schedule.num_levels());
        let adam = Adam::new(self.config.learning_rate);
        let seed = self.config.seed;
        let stage_tag = state.stage as u64;
        let mut epoch_cache: Option<(usize, Vec<Batch>)> = None;

        let end = stage.steps.min(stop_at);
        while state.stage_step < end {
            let k = state.stage_step;
            let batch = {
                let per_epoch = match &epoch_cache {
                    Some((_, b)) => b.len(),
                    None => 0,
                };
                let need_epoch = if per_epoch == 0 { None } else { Some(k / per_epoch) };
                let reload = match (&epoch_cache, need_epoch) {
                    (Some((e, _)), Some(n)) => *e != n,
                    _ => true,
                };
                if reload {
                    let epoch = match need_epoch {
                        Some(n) => n,
                        None => {
                            let first = make_batch_schedule(
                                &self.data.manifest,
                                &buckets,
                                stage.batch_size,
                                &mut stream(seed, &[TAG_EPOCH, stage_tag, 0]),
                            )?;
                            k / first.len()
                        }
                    };
                    let batches = make_batch_schedule(
                        &self.data.manifest,
                        &buckets,
                        stage.batch_size,
                        &mut stream(seed, &[TAG_EPOCH, stage_tag, epoch as u64]),
                    )?;
                    epoch_cache = Some((epoch, batches));
                }
                let (epoch, batches) = epoch_cache.as_ref().unwrap();
                batches[k - epoch * batches.len()].clone()
            };
            let bucket = buckets.buckets[batch.bucket];
            let mut rng = stream(seed, &[TAG_STEP, stage_tag, k as u64]);

            let mut images = Vec::with_capacity(batch.entries.len());
            let mut micro = Vec::with_capacity(batch.entries.len());
            let mut contexts = Vec::with_capacity(batch.entries.len());
            for &i in &batch.entries {
                let e = &self.data.manifest.entries[i];
                let (px, cond) = prepare_pixels(&self.data.pixels[i], (e.h_original, e.w_original), bucket, &mut rng)?;
                let caption = e.caption.clone();
                images.push(px.map(|v| 2.0 * v - 1.0));
                micro.push(cond);
                let ctx = self.context(&state.text, &caption)?;
                contexts.push(cfg_dropout(&ctx, &null, stage.cfg_dropout_p, &mut rng)?);
            }
            let mut x0 = Tensor::stack(&images);
            if let Some(ae) = self.autoencoder {
                x0 = ae.encode(&x0)?;
            }
            if x0.dim(1) != self.config.denoiser.in_channels {
                return Err(Error::shape(format!(
                    "data has {} channels, denoiser expects {}",
                    x0.dim(1),
                    self.config.denoiser.in_channels
                )));
            }
            let refs: Vec<&TextContext> = contexts.iter().collect();
            let tb = TrainBatch {
                x0,
                cond: CondBatch::from_contexts(&refs, micro),
            };
            let levels = draw_levels(batch.entries.len(), max_level, &mut rng);

            let (loss, mut grads) = {
                let mut g = Graph::new(state.model.params());
                let loss = dsm_loss_graph(&mut g, &state.model, &tb, &self.schedule, &levels, stage.offset_level, &mut rng)?;
                let value = g.value(loss).data()[0];
                (value, g.backward(loss).into_param_grads(state.model.params().len()))
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: state.global_step,
                    detail: format!("loss in stage {:?}", stage.name),
                });
            }
            if let Some(max) = self.config.grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            adam.step(&mut state.adam, state.model.params_mut(), &grads);
            ema_update(&mut state.ema, state.model.params(), self.config.ema_decay)?;

            let mut hist = vec![0; 10];
            for &l in &levels {
                hist[l * 10 / self.schedule.num_levels()] += 1;
            }
            log(&LogRecord {
                stage: stage.name.clone(),
                stage_index: state.stage,
                step: state.global_step,
                stage_step: k,
                bucket,
                loss,
                level_histogram: hist,
            });
            state.stage_step += 1;
            state.global_step += 1;
        }
        if state.stage_step >= stage.steps {
            state.stage += 1;
            state.stage_step = 0;
        }
        Ok(())
    }
}

/// Runs the current stage of `state` to completion and returns the
/// resulting checkpoint.
pub fn run_stage(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &TrainData,
    autoencoder: Option<&Autoencoder>,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config, data, autoencoder)?;
    trainer.run_stage_until(state, usize::MAX, log)?;
    state.to_checkpoint(config, trainer.latent_info())
}
