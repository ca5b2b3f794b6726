//! Fourier encodings of integer conditioning values and the micro-conditioning
//! pipeline: original size, crop offsets and target (bucket) size.
//!
//! The six components are embedded independently and concatenated in the
//! frozen order `h_original, w_original, c_top, c_left, h_target, w_target`.
//! The resulting vector, together with the pooled text embedding, passes
//! through one bias-free linear projection and is added to the timestep
//! embedding.

use microdiff_nn::layers::Linear;
use microdiff_nn::{Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default Fourier width per conditioning component.
pub const DEFAULT_FOURIER_DIM: usize = 256;

const MAX_PERIOD: f64 = 10_000.0;

/// Size, crop and target-size conditioning in pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MicroCond {
    /// `(h_original, w_original)` before any rescaling.
    pub size: (u32, u32),
    /// `(c_top, c_left)` in resized-image pixels.
    pub crop: (u32, u32),
    /// `(h_target, w_target)`, the training bucket.
    pub target: (u32, u32),
}

impl MicroCond {
    pub fn new(size: (u32, u32), crop: (u32, u32), target: (u32, u32)) -> Self {
        Self { size, crop, target }
    }

    /// Inference default: uncropped, original size equal to the target.
    pub fn for_inference(target: (u32, u32)) -> Self {
        Self {
            size: target,
            crop: (0, 0),
            target,
        }
    }

    /// Components in the frozen embedding order.
    pub fn components(&self) -> [u32; 6] {
        [
            self.size.0,
            self.size.1,
            self.crop.0,
            self.crop.1,
            self.target.0,
            self.target.1,
        ]
    }

    pub fn from_components(c: [u32; 6]) -> Self {
        Self {
            size: (c[0], c[1]),
            crop: (c[2], c[3]),
            target: (c[4], c[5]),
        }
    }

    /// Six little-endian `u32`s in component order.
    pub fn to_le_bytes(&self) -> [u8; 24] {
        let mut out = [0u8; 24];
        for (chunk, v) in out.chunks_mut(4).zip(self.components()) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 24 {
            return Err(Error::format(format!(
                "micro-conditioning record must be 24 bytes, got {}",
                bytes.len()
            )));
        }
        let mut c = [0u32; 6];
        for (v, chunk) in c.iter_mut().zip(bytes.chunks(4)) {
            *v = u32::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(Self::from_components(c))
    }
}

/// Which conditioning pairs reach the model. Disabled pairs embed as zeros,
/// the same representation as null conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CondMask {
    pub size: bool,
    pub crop: bool,
    pub target: bool,
}

impl Default for CondMask {
    fn default() -> Self {
        Self {
            size: true,
            crop: true,
            target: true,
        }
    }
}

impl CondMask {
    pub const NONE: CondMask = CondMask {
        size: false,
        crop: false,
        target: false,
    };
}

/// Concatenated Fourier features of all six components, `6 * d_f` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct CondEmbedding {
    pub vector: Vec<f64>,
}

impl CondEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// The `d_f`-wide block of component `index` (0..6).
    pub fn block(&self, index: usize) -> &[f64] {
        let d_f = self.vector.len() / 6;
        &self.vector[index * d_f..(index + 1) * d_f]
    }
}

/// Angular frequencies, log-spaced from 1 down to `1 / 10000` inclusive.
pub fn fourier_frequencies(half: usize) -> Vec<f64> {
    if half == 1 {
        return vec![1.0];
    }
    (0..half)
        .map(|k| (-MAX_PERIOD.ln() * k as f64 / (half - 1) as f64).exp())
        .collect()
}

/// `[sin(x * w_k)..., cos(x * w_k)...]` for a real input.
pub fn fourier_features(x: f64, d_f: usize) -> Vec<f64> {
    let freqs = fourier_frequencies(d_f / 2);
    let mut out = Vec::with_capacity(d_f);
    out.extend(freqs.iter().map(|w| (x * w).sin()));
    out.extend(freqs.iter().map(|w| (x * w).cos()));
    out
}

/// Fourier encoding of a non-negative integer conditioning value.
pub fn fourier_embed(value: u32, d_f: usize) -> Result<Vec<f64>> {
    check_width(d_f)?;
    Ok(fourier_features(f64::from(value), d_f))
}

fn check_width(d_f: usize) -> Result<()> {
    if d_f < 2 || d_f % 2 != 0 {
        return Err(Error::invalid(format!("Fourier width must be even and >= 2, got {d_f}")));
    }
    Ok(())
}

pub fn embed_microcond(cond: &MicroCond, d_f: usize) -> Result<CondEmbedding> {
    embed_microcond_masked(cond, d_f, CondMask::default())
}

pub fn embed_microcond_masked(cond: &MicroCond, d_f: usize, mask: CondMask) -> Result<CondEmbedding> {
    check_width(d_f)?;
    let enabled = [mask.size, mask.size, mask.crop, mask.crop, mask.target, mask.target];
    let mut vector = Vec::with_capacity(6 * d_f);
    for (value, on) in cond.components().into_iter().zip(enabled) {
        if on {
            vector.extend(fourier_embed(value, d_f)?);
        } else {
            vector.extend(std::iter::repeat(0.0).take(d_f));
        }
    }
    Ok(CondEmbedding { vector })
}

/// Null micro-conditioning: all zeros before the projection.
pub fn null_cond_embedding(d_f: usize) -> CondEmbedding {
    CondEmbedding {
        vector: vec![0.0; 6 * d_f],
    }
}

/// Bias-free linear map from `cond ++ pooled` to the time-embedding width.
#[derive(Clone, Debug)]
pub struct ConditioningProjection {
    /// `[time_dim, cond_dim + pooled_dim]`
    weight: Tensor,
    cond_dim: usize,
    pooled_dim: usize,
}

impl ConditioningProjection {
    pub fn new(weight: Tensor, cond_dim: usize, pooled_dim: usize) -> Result<Self> {
        if weight.rank() != 2 || weight.dim(1) != cond_dim + pooled_dim {
            return Err(Error::shape(format!(
                "projection weight {:?} does not map {} inputs",
                weight.shape(),
                cond_dim + pooled_dim
            )));
        }
        Ok(Self {
            weight,
            cond_dim,
            pooled_dim,
        })
    }

    pub fn time_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// `time_embedding + W (cond ++ pooled)`.
    pub fn inject(&self, time_embedding: &[f64], cond: &CondEmbedding, pooled: &[f64]) -> Result<Vec<f64>> {
        if time_embedding.len() != self.time_dim() {
            return Err(Error::shape(format!(
                "time embedding width {} != projection output {}",
                time_embedding.len(),
                self.time_dim()
            )));
        }
        if cond.dim() != self.cond_dim || pooled.len() != self.pooled_dim {
            return Err(Error::shape(format!(
                "conditioning widths ({}, {}) != expected ({}, {})",
                cond.dim(),
                pooled.len(),
                self.cond_dim,
                self.pooled_dim
            )));
        }
        let input: Vec<f64> = cond.vector.iter().chain(pooled).copied().collect();
        let cols = input.len();
        Ok(time_embedding
            .iter()
            .enumerate()
            .map(|(r, t)| {
                let row = &self.weight.data()[r * cols..(r + 1) * cols];
                t + row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect())
    }
}

pub fn inject_conditioning(
    time_embedding: &[f64],
    cond_embedding: &CondEmbedding,
    pooled_text: &[f64],
    projection: &ConditioningProjection,
) -> Result<Vec<f64>> {
    projection.inject(time_embedding, cond_embedding, pooled_text)
}

/// Graph form of [`inject_conditioning`] for a batch: `time: [n, t]`,
/// `cond_pooled: [n, cond + pooled]`.
pub fn inject_conditioning_graph(g: &mut Graph<'_>, time: Var, cond_pooled: Var, projection: &Linear) -> Var {
    let projected = projection.forward(g, cond_pooled);
    g.add(time, projected)
}

/// Resized extent when scaling `original` to cover `target` (never below it).
pub fn resize_to_cover(original: (u32, u32), target: (u32, u32)) -> (u32, u32) {
    let (h, w) = (f64::from(original.0.max(1)), f64::from(original.1.max(1)));
    let scale = (f64::from(target.0) / h).max(f64::from(target.1) / w);
    let rh = ((h * scale).round() as u32).max(target.0);
    let rw = ((w * scale).round() as u32).max(target.1);
    (rh, rw)
}

/// Training-time draw of micro-conditioning for one example.
///
/// The original size is recorded as given; the crop is uniform over every
/// valid integer offset of the resized image.
pub fn sample_train_conditioning<R: Rng + ?Sized>(
    original: (u32, u32),
    target: (u32, u32),
    rng: &mut R,
) -> Result<MicroCond> {
    if original.0 == 0 || original.1 == 0 {
        return Err(Error::invalid(format!("original size {original:?} must be >= 1")));
    }
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::invalid(format!("target size {target:?} must be >= 1")));
    }
    let (rh, rw) = resize_to_cover(original, target);
    let c_top = rng.gen_range(0..=rh - target.0);
    let c_left = rng.gen_range(0..=rw - target.1);
    Ok(MicroCond {
        size: original,
        crop: (c_top, c_left),
        target,
    })
}
