//! Criteria that train toy models on the synthetic size/crop dataset.
//!
//! Small originals are rendered at 6-8 px and upsampled to the 16x16 bucket,
//! so they arrive low-pass filtered; large originals (24-32 px) arrive
//! sharp. Half the images are 1:2 or 2:1 and get honest random crops.

use std::time::Instant;

use microdiff::autoencoder::{train_autoencoder, AeTrainConfig, Autoencoder, AutoencoderConfig};
use microdiff::data::image_io::resize;
use microdiff::data::prepare_pixels;
use microdiff::data::synthetic::{synthetic_example, synthetic_manifest, SyntheticConfig, SHAPES};
use microdiff::embedding::{CondMask, MicroCond};
use microdiff::eval::{center_of_mass, highfreq_energy, image_frechet, AeFeatures};
use microdiff::rng::stream;
use microdiff::sample::{Pipeline, SampleRequest, SdeConfig, DEFAULT_GUIDANCE, DEFAULT_REFINE_LEVELS, DEFAULT_STEPS};
use microdiff::schedule::NoiseSchedule;
use microdiff::train::{TrainConfig, TrainData, TrainState, Trainer};
use microdiff_nn::Tensor;

use crate::common::{stage, toy_config};
use crate::stats::{mean, paired_greater, welch_greater};
use crate::Verdict;

const BUCKET: u32 = 16;
const LARGE: (u32, u32) = (32, 32);
const SMALL: (u32, u32) = (8, 8);
const MAX_CROP: (u32, u32) = (16, 16);
const SAMPLES: usize = 200;

fn dataset() -> SyntheticConfig {
    SyntheticConfig {
        count: 400,
        seed: 11,
        ..Default::default()
    }
}

pub struct Trained {
    pub state: TrainState,
    pub secs: f64,
    pub last_loss: f64,
}

impl Trained {
    fn pipeline<'a>(&'a self, schedule: &'a NoiseSchedule) -> Pipeline<'a> {
        Pipeline {
            model: &self.state.model,
            params: &self.state.ema,
            text: &self.state.text,
            schedule,
            autoencoder: None,
        }
    }
}

pub struct Lab {
    steps: usize,
    data: TrainData,
    schedule: NoiseSchedule,
    size_cond: Option<Trained>,
    discard: Option<Trained>,
    nocond: Option<Trained>,
    refiner: Option<Trained>,
    ae: Option<Autoencoder>,
}

impl Lab {
    pub fn new() -> Self {
        let steps = std::env::var("MICRODIFF_LAB_STEPS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(6000);
        let data = TrainData::load(&synthetic_manifest(&dataset()).unwrap());
        Self {
            steps,
            data,
            schedule: NoiseSchedule::new(Default::default()).unwrap(),
            size_cond: None,
            discard: None,
            nocond: None,
            refiner: None,
            ae: None,
        }
    }

    fn train(&self, name: &str, edit: impl FnOnce(&mut TrainConfig)) -> Result<Trained, String> {
        let mut cfg = toy_config(31, vec![stage(name, self.steps, BUCKET)]);
        cfg.stages[0].batch_size = 8;
        cfg.ema_decay = 0.999;
        edit(&mut cfg);
        let t = Instant::now();
        let mut state = TrainState::init(&cfg).map_err(|e| e.to_string())?;
        let mut losses = Vec::new();
        Trainer::new(&cfg, &self.data, None)
            .map_err(|e| e.to_string())?
            .run(&mut state, &mut |r| losses.push(r.loss))
            .map_err(|e| e.to_string())?;
        let tail = &losses[losses.len().saturating_sub(200)..];
        Ok(Trained {
            state,
            secs: t.elapsed().as_secs_f64(),
            last_loss: mean(tail),
        })
    }

    fn size_cond(&mut self) -> Result<&Trained, String> {
        if self.size_cond.is_none() {
            self.size_cond = Some(self.train("size-cond", |_| {})?);
        }
        Ok(self.size_cond.as_ref().unwrap())
    }

    fn baselines(&mut self) -> Result<(), String> {
        if self.discard.is_none() {
            self.discard = Some(self.train("discard-small", |c| c.discard_below = Some(BUCKET))?);
        }
        if self.nocond.is_none() {
            self.nocond = Some(self.train("no-size-cond", |c| {
                c.denoiser.cond_mask = CondMask {
                    size: false,
                    ..CondMask::default()
                }
            })?);
        }
        Ok(())
    }

    fn refiner(&mut self) -> Result<&Trained, String> {
        if self.refiner.is_none() {
            self.refiner = Some(self.train("refiner", |c| {
                c.discard_below = Some(BUCKET);
                c.stages[0].max_level = Some(DEFAULT_REFINE_LEVELS);
            })?);
        }
        Ok(self.refiner.as_ref().unwrap())
    }

    /// Autoencoder trained on the prepared training images, used as the
    /// feature extractor.
    fn autoencoder(&mut self) -> Result<&Autoencoder, String> {
        if self.ae.is_none() {
            let mut rng = stream(41, &[0]);
            let images: Vec<Tensor> = (0..self.data.len())
                .map(|i| {
                    let e = &self.data.manifest.entries[i];
                    prepare_pixels(&self.data.pixels[i], (e.h_original, e.w_original), (BUCKET, BUCKET), &mut rng)
                        .unwrap()
                        .0
                })
                .collect();
            let cfg = AutoencoderConfig {
                in_channels: 1,
                latent_channels: 4,
                downsample_factor: 4,
                base_channels: 8,
            };
            let out = train_autoencoder(cfg, &AeTrainConfig::default(), &images).map_err(|e| e.to_string())?;
            let mut ae = out.model;
            ae.set_params(out.ema).map_err(|e| e.to_string())?;
            self.ae = Some(ae);
        }
        Ok(self.ae.as_ref().unwrap())
    }
}

/// Model-space samples, half per shape caption.
fn states(model: &Trained, schedule: &NoiseSchedule, micro: MicroCond, seed: u64) -> Result<Vec<Tensor>, String> {
    let pipe = model.pipeline(schedule);
    let mut out = Vec::new();
    for (k, shape) in SHAPES.iter().enumerate() {
        let mut req = SampleRequest::new(*shape, (BUCKET, BUCKET), seed + k as u64);
        req.microcond = micro;
        req.steps = DEFAULT_STEPS;
        req.guidance_w = DEFAULT_GUIDANCE;
        let n = SAMPLES / SHAPES.len();
        out.push(pipe.generate(&req, n, &SdeConfig::default()).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn images(model: &Trained, schedule: &NoiseSchedule, micro: MicroCond, seed: u64) -> Result<Vec<Tensor>, String> {
    let pipe = model.pipeline(schedule);
    let mut out = Vec::new();
    for s in states(model, schedule, micro, seed)? {
        out.extend(pipe.to_images(&s).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn highfreq(images: &[Tensor]) -> Vec<f64> {
    images.iter().map(|x| highfreq_energy(x).unwrap()).collect()
}

/// Distance of the bright object's centroid from the image centre.
fn displacement(x: &Tensor) -> f64 {
    let (h, w) = (x.dim(1) as f64, x.dim(2) as f64);
    let obj = x.map(|v| (v - 0.5).max(0.0));
    let (r, c) = center_of_mass(&obj).or_else(|_| center_of_mass(x)).unwrap_or(((h - 1.0) / 2.0, 0.0));
    (r - (h - 1.0) / 2.0).hypot(c - (w - 1.0) / 2.0)
}

fn cond(size: (u32, u32), crop: (u32, u32)) -> MicroCond {
    MicroCond::new(size, crop, (BUCKET, BUCKET))
}

pub fn microcond_effects(lab: &mut Lab) -> Verdict {
    let steps = lab.steps;
    let schedule = lab.schedule.clone();
    let model = lab.size_cond()?;
    let large = highfreq(&images(model, &schedule, cond(LARGE, (0, 0)), 500)?);
    let small = highfreq(&images(model, &schedule, cond(SMALL, (0, 0)), 500)?);
    let (ta, pa) = welch_greater(&large, &small);

    let centred: Vec<f64> = images(model, &schedule, cond(LARGE, (0, 0)), 600)?.iter().map(displacement).collect();
    let cropped: Vec<f64> = images(model, &schedule, cond(LARGE, MAX_CROP), 600)?.iter().map(displacement).collect();
    let (tb, pb) = welch_greater(&cropped, &centred);
    let pass = pa < 0.01 && pb < 0.01 && mean(&large) > mean(&small) && mean(&cropped) > mean(&centred);
    Ok((
        pass,
        format!(
            "{steps} steps ({:.0}s, loss {:.2}); (a) highfreq size {LARGE:?} {:.4} vs {SMALL:?} {:.4}, t {ta:.2} p {pa:.1e}; \
             (b) COM offset crop (0,0) {:.3} vs {MAX_CROP:?} {:.3} px, t {tb:.2} p {pb:.1e}",
            model.secs,
            model.last_loss,
            mean(&large),
            mean(&small),
            mean(&centred),
            mean(&cropped)
        ),
    ))
}

/// Large square originals from a separate draw, at bucket size.
fn held_out() -> Vec<Tensor> {
    let cfg = SyntheticConfig {
        count: SAMPLES,
        seed: 977,
        small_fraction: 0.0,
        oblong_fraction: 0.0,
        ..dataset()
    };
    (0..SAMPLES)
        .map(|i| resize(&synthetic_example(&cfg, i).2, BUCKET as usize, BUCKET as usize))
        .collect()
}

pub fn size_cond_ordering(lab: &mut Lab) -> Verdict {
    lab.size_cond()?;
    lab.baselines()?;
    lab.autoencoder()?;
    let schedule = lab.schedule.clone();
    let reference = held_out();
    let ae = lab.ae.as_ref().unwrap();
    let features = AeFeatures(ae);
    let micro = cond(LARGE, (0, 0));
    let mut fd = Vec::new();
    for model in [&lab.size_cond, &lab.discard, &lab.nocond] {
        let imgs = images(model.as_ref().unwrap(), &schedule, micro, 700)?;
        fd.push(image_frechet(&features, &imgs, &reference).map_err(|e| e.to_string())?);
    }
    let pass = fd[0] < fd[1] && fd[0] < fd[2];
    Ok((
        pass,
        format!(
            "Frechet vs held-out large originals ({}): size-cond {:.4}, discard-small {:.4} ({} of {} images kept), no-size-cond {:.4}",
            features_id(ae),
            fd[0],
            fd[1],
            lab.data.discard_below(BUCKET).len(),
            lab.data.len(),
            fd[2]
        ),
    ))
}

fn features_id(ae: &Autoencoder) -> String {
    use microdiff::eval::FeatureExtractor;
    AeFeatures(ae).id()
}

pub fn refinement(lab: &mut Lab) -> Verdict {
    let schedule = lab.schedule.clone();
    lab.size_cond()?;
    lab.refiner()?;
    let (base_model, refiner) = (lab.size_cond.as_ref().unwrap(), lab.refiner.as_ref().unwrap());
    let micro = MicroCond::for_inference((BUCKET, BUCKET));
    let base_pipe = base_model.pipeline(&schedule);
    let ref_pipe = refiner.pipeline(&schedule);
    let mut identity = true;
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for (k, shape) in SHAPES.iter().enumerate() {
        let mut req = SampleRequest::new(*shape, (BUCKET, BUCKET), 800 + k as u64);
        req.microcond = micro;
        let base = base_pipe
            .generate(&req, SAMPLES / SHAPES.len(), &SdeConfig::default())
            .map_err(|e| e.to_string())?;
        identity &= ref_pipe.refine(&base, &req, 0).map_err(|e| e.to_string())? == base;
        let refined = ref_pipe.refine(&base, &req, DEFAULT_REFINE_LEVELS).map_err(|e| e.to_string())?;
        before.extend(highfreq(&base_pipe.to_images(&base).map_err(|e| e.to_string())?));
        after.extend(highfreq(&ref_pipe.to_images(&refined).map_err(|e| e.to_string())?));
    }
    let (t, p) = paired_greater(&after, &before);
    let pass = identity && p < 0.05;
    Ok((
        pass,
        format!(
            "refine_levels=0 identity {identity}; highfreq base {:.4} -> refined {:.4} at {DEFAULT_REFINE_LEVELS}/1000, paired t {t:.2} p {p:.1e} (refiner {:.0}s)",
            mean(&before),
            mean(&after),
            refiner.secs
        ),
    ))
}
