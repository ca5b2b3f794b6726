//! Discrete noise schedule, the noising operator (with offset noise) and the
//! per-level loss weights.
//!
//! Noise levels are stored as explicit standard deviations `sigma_i` of the
//! additive corruption `x_t = x_0 + sigma_i * eps`, derived from a linear
//! variance-preserving beta schedule. Training stays discrete-time; the
//! samplers integrate over the same sigma grid.

use microdiff_nn::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The serialized form of a schedule. Sigmas are always recomputed from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub num_levels: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_levels: 1000,
            beta_min: 1e-4,
            beta_max: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    sigmas: Vec<f64>,
    weights: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            num_levels,
            beta_min,
            beta_max,
        } = config;
        if num_levels < 2 {
            return Err(Error::invalid(format!("num_levels must be >= 2, got {num_levels}")));
        }
        if !(beta_min > 0.0 && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "beta endpoints must lie in (0, 1), got [{beta_min}, {beta_max}]"
            )));
        }
        if beta_min > beta_max {
            return Err(Error::invalid(format!(
                "beta_min {beta_min} exceeds beta_max {beta_max}"
            )));
        }
        let mut alpha_bar = 1.0;
        let mut sigmas = Vec::with_capacity(num_levels);
        for i in 0..num_levels {
            let frac = i as f64 / (num_levels - 1) as f64;
            let beta = beta_min + frac * (beta_max - beta_min);
            alpha_bar *= 1.0 - beta;
            sigmas.push(((1.0 - alpha_bar) / alpha_bar).sqrt());
        }
        let weights = sigmas.iter().map(|s| 1.0 / (s * s)).collect();
        Ok(Self {
            config,
            sigmas,
            weights,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn num_levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma(&self, level: usize) -> Result<f64> {
        self.check(level)?;
        Ok(self.sigmas[level])
    }

    pub fn sigma_max(&self) -> f64 {
        *self.sigmas.last().unwrap()
    }

    /// `lambda_sigma = sigma^-2` for the given level.
    pub fn loss_weight(&self, level: usize) -> Result<f64> {
        self.check(level)?;
        Ok(self.weights[level])
    }

    fn check(&self, level: usize) -> Result<()> {
        if level >= self.sigmas.len() {
            return Err(Error::LevelOutOfRange {
                index: level,
                len: self.sigmas.len(),
            });
        }
        Ok(())
    }
}

/// Builds the linear-beta schedule with `num_levels` levels.
pub fn build_schedule(num_levels: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleConfig {
        num_levels,
        beta_min,
        beta_max,
    })
}

pub fn loss_weight(schedule: &NoiseSchedule, level: usize) -> Result<f64> {
    schedule.loss_weight(level)
}

/// A noised sample together with the unit noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub x_t: Tensor,
    pub level_index: usize,
    pub epsilon: Tensor,
}

/// Draws `eps` and returns `x0 + sigma_level * eps`.
///
/// `eps` is an i.i.d. standard normal draw plus `offset_level` times one
/// standard normal per channel, broadcast over the two trailing (spatial)
/// axes. Every axis before the last two counts as a channel axis.
pub fn add_noise<R: Rng + ?Sized>(
    x0: &Tensor,
    level_index: usize,
    schedule: &NoiseSchedule,
    offset_level: f64,
    rng: &mut R,
) -> Result<NoisySample> {
    let sigma = schedule.sigma(level_index)?;
    let (x_t, epsilon) = noise_with_sigma(x0, sigma, offset_level, rng)?;
    Ok(NoisySample {
        x_t,
        level_index,
        epsilon,
    })
}

/// [`add_noise`] for an explicit sigma; returns `(x_t, epsilon)`.
pub fn noise_with_sigma<R: Rng + ?Sized>(
    x0: &Tensor,
    sigma: f64,
    offset_level: f64,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if !(offset_level >= 0.0) {
        return Err(Error::invalid(format!("offset_level must be >= 0, got {offset_level}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let epsilon = draw_epsilon(x0.shape(), offset_level, rng);
    let mut x_t = x0.clone();
    x_t.axpy(sigma, &epsilon);
    Ok((x_t, epsilon))
}

/// Unit noise with an optional per-channel offset component.
pub fn draw_epsilon<R: Rng + ?Sized>(shape: &[usize], offset_level: f64, rng: &mut R) -> Tensor {
    let mut eps = Tensor::randn(shape, 1.0, rng);
    if offset_level > 0.0 {
        let spatial: usize = shape.iter().rev().take(2).product();
        for chunk in eps.data_mut().chunks_mut(spatial.max(1)) {
            let offset = offset_level * rng.sample::<f64, _>(StandardNormal);
            chunk.iter_mut().for_each(|v| *v += offset);
        }
    }
    eps
}
