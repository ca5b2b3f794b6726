//! Synthetic datasets with known size and crop structure.
//!
//! Each image is rendered at its original resolution: a textured background
//! with one bright object (disk or square, named by the caption) at the
//! centre. Fine texture is drawn per original pixel, so once examples are
//! resized to a bucket, small originals look blurry and large ones sharp.

use microdiff_nn::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, ManifestEntry, Source};
use crate::rng::stream;
use crate::{Error, Result};

pub const BACKGROUND: f64 = 0.15;
pub const FOREGROUND: f64 = 0.85;
pub const SHAPES: [&str; 2] = ["disk", "square"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    pub channels: usize,
    /// Fraction of images with a short side drawn from `small_sides`.
    pub small_fraction: f64,
    pub small_sides: (u32, u32),
    pub large_sides: (u32, u32),
    /// Fraction of images with a 1:2 or 2:1 aspect ratio instead of square.
    pub oblong_fraction: f64,
    /// Object radius relative to the short side.
    pub object_scale: f64,
    pub texture_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 200,
            channels: 1,
            small_fraction: 0.4,
            small_sides: (6, 8),
            large_sides: (24, 32),
            oblong_fraction: 0.5,
            object_scale: 0.3,
            texture_std: 0.08,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |(a, b): (u32, u32)| a >= 1 && a <= b;
        if !ok_range(self.small_sides) || !ok_range(self.large_sides) || self.channels == 0 {
            return Err(Error::invalid("synthetic side ranges must satisfy 1 <= min <= max"));
        }
        if !(0.0..=1.0).contains(&self.small_fraction) || !(0.0..=1.0).contains(&self.oblong_fraction) {
            return Err(Error::invalid("synthetic fractions must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Renders a `[channels, h, w]` image with the object centred at `centre`
/// (row, col in pixels).
pub fn render<R: Rng + ?Sized>(
    channels: usize,
    h: usize,
    w: usize,
    shape: &str,
    centre: (f64, f64),
    radius: f64,
    texture_std: f64,
    rng: &mut R,
) -> Tensor {
    let mut plane = vec![0.0; h * w];
    for (i, v) in plane.iter_mut().enumerate() {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let (dy, dx) = (y - centre.0, x - centre.1);
        let inside = match shape {
            "square" => dy.abs() <= radius && dx.abs() <= radius,
            _ => dy * dy + dx * dx <= radius * radius,
        };
        *v = if inside { FOREGROUND } else { BACKGROUND };
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        data.extend(
            plane
                .iter()
                .map(|v| (v + texture_std * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0)),
        );
    }
    Tensor::new(vec![channels, h, w], data)
}

/// One synthetic example: `(original (h, w), caption, pixels)`.
pub fn synthetic_example(cfg: &SyntheticConfig, index: usize) -> ((u32, u32), String, Tensor) {
    let mut rng = stream(cfg.seed, &[index as u64]);
    let (lo, hi) = if rng.gen_bool(cfg.small_fraction) {
        cfg.small_sides
    } else {
        cfg.large_sides
    };
    let short = rng.gen_range(lo..=hi);
    let (h, w) = if rng.gen_bool(cfg.oblong_fraction) {
        if rng.gen_bool(0.5) {
            (short, 2 * short)
        } else {
            (2 * short, short)
        }
    } else {
        (short, short)
    };
    let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
    let centre = ((f64::from(h) - 1.0) / 2.0, (f64::from(w) - 1.0) / 2.0);
    let radius = cfg.object_scale * f64::from(short);
    let px = render(cfg.channels, h as usize, w as usize, shape, centre, radius, cfg.texture_std, &mut rng);
    ((h, w), shape.to_string(), px)
}

/// Manifest of `cfg.count` examples with raw pixel sources.
pub fn synthetic_manifest(cfg: &SyntheticConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let entries = (0..cfg.count)
        .map(|i| {
            let ((h, w), caption, px) = synthetic_example(cfg, i);
            ManifestEntry {
                id: format!("syn{:05}", i),
                h_original: h,
                w_original: w,
                source: Source::Raw(px),
                caption,
            }
        })
        .collect();
    DatasetManifest::new(entries)
}
