//! Multi-aspect bucket generation and assignment.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fraction of the target area a bucket must reach.
pub const DEFAULT_MIN_FILL: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSet {
    /// `(h, w)` pairs ordered by strictly increasing `h / w`.
    pub buckets: Vec<(u32, u32)>,
    pub target_area: u64,
    pub step: u32,
}

impl BucketSet {
    /// A set holding one resolution, used by fixed-size training stages.
    pub fn single(h: u32, w: u32) -> Self {
        Self {
            buckets: vec![(h, w)],
            target_area: u64::from(h) * u64::from(w),
            step: gcd(h, w),
        }
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    pub fn index_of(&self, bucket: (u32, u32)) -> Option<usize> {
        self.buckets.iter().position(|&b| b == bucket)
    }

    /// Three-column `Height Width Aspect Ratio` table, ratios to two decimals.
    pub fn to_table(&self) -> String {
        let mut out = String::from("Height\tWidth\tAspect Ratio\n");
        for &(h, w) in &self.buckets {
            let _ = writeln!(out, "{h}\t{w}\t{}", format_ratio(f64::from(h) / f64::from(w)));
        }
        out
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Two decimals with trailing zeros trimmed, keeping one (`1.0`, `0.4`, `2.09`).
pub fn format_ratio(r: f64) -> String {
    let s = format!("{:.2}", r);
    let s = s.trim_end_matches('0');
    if s.ends_with('.') {
        format!("{s}0")
    } else {
        s.to_string()
    }
}

/// Buckets with [`DEFAULT_MIN_FILL`].
pub fn generate_buckets(target_area: u64, step: u32, min_side: u32, max_side: u32) -> Result<BucketSet> {
    generate_buckets_with_fill(target_area, step, min_side, max_side, DEFAULT_MIN_FILL)
}

/// Every `(h, w)` with sides on the `step` grid in `[min_side, max_side]` and
/// `min_fill * target_area < h * w <= target_area`, sorted by aspect ratio.
pub fn generate_buckets_with_fill(
    target_area: u64,
    step: u32,
    min_side: u32,
    max_side: u32,
    min_fill: f64,
) -> Result<BucketSet> {
    if step == 0 || min_side == 0 || min_side % step != 0 || max_side % step != 0 {
        return Err(Error::invalid(format!(
            "step {step} must be positive and divide min_side {min_side} and max_side {max_side}"
        )));
    }
    if min_side > max_side {
        return Err(Error::invalid(format!("min_side {min_side} exceeds max_side {max_side}")));
    }
    if !(0.0..1.0).contains(&min_fill) {
        return Err(Error::invalid(format!("min_fill must be in [0, 1), got {min_fill}")));
    }
    let floor = min_fill * target_area as f64;
    let mut buckets = Vec::new();
    for h in (min_side..=max_side).step_by(step as usize) {
        for w in (min_side..=max_side).step_by(step as usize) {
            let area = u64::from(h) * u64::from(w);
            let fits = area <= target_area && (area as f64 > floor || area == target_area);
            if fits {
                buckets.push((h, w));
            }
        }
    }
    if buckets.is_empty() {
        return Err(Error::invalid(format!(
            "no {step}-grid sides in [{min_side}, {max_side}] reach {min_fill} of area {target_area}"
        )));
    }
    // h1/w1 < h2/w2  <=>  h1*w2 < h2*w1; equal ratios keep the larger area
    buckets.sort_by(|a, b| {
        (u64::from(a.0) * u64::from(b.1))
            .cmp(&(u64::from(b.0) * u64::from(a.1)))
            .then((u64::from(b.0) * u64::from(b.1)).cmp(&(u64::from(a.0) * u64::from(a.1))))
    });
    buckets.dedup_by(|a, b| u64::from(a.0) * u64::from(b.1) == u64::from(b.0) * u64::from(a.1));
    Ok(BucketSet {
        buckets,
        target_area,
        step,
    })
}

/// Bucket whose log aspect ratio is nearest to `ln(h / w)`; ties go to the lower index.
pub fn assign_bucket(h: u32, w: u32, buckets: &BucketSet) -> Result<usize> {
    if buckets.is_empty() {
        return Err(Error::invalid("empty bucket set"));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("image size {h}x{w} must be positive")));
    }
    let r = (f64::from(h) / f64::from(w)).ln();
    let mut best = (0, f64::INFINITY);
    for (i, &(bh, bw)) in buckets.buckets.iter().enumerate() {
        let d = (r - (f64::from(bh) / f64::from(bw)).ln()).abs();
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best.0)
}
