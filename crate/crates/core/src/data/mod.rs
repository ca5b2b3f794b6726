//! Dataset ingestion, bucketing and per-example preparation.

mod buckets;
pub mod image_io;
mod manifest;
pub mod synthetic;

use std::collections::BTreeMap;

use microdiff_nn::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use buckets::{
    assign_bucket, format_ratio, generate_buckets, generate_buckets_with_fill, BucketSet, DEFAULT_MIN_FILL,
};
pub use manifest::{DatasetManifest, ManifestEntry, Source, MANIFEST_HEADER};

use crate::embedding::{resize_to_cover, sample_train_conditioning, MicroCond};
use crate::{Error, Result};

/// Resizes the entry's pixels so the bucket is covered, then crops a random
/// bucket-sized window. `cond.size` echoes the manifest's original size.
pub fn prepare_example<R: Rng + ?Sized>(
    entry: &ManifestEntry,
    bucket: (u32, u32),
    rng: &mut R,
) -> Result<(Tensor, MicroCond)> {
    let pixels = entry.source.load()?;
    prepare_pixels(&pixels, (entry.h_original, entry.w_original), bucket, rng)
        .map_err(|e| Error::data(format!("entry {:?}: {e}", entry.id)))
}

/// [`prepare_example`] for already decoded `[c, h, w]` pixels.
pub fn prepare_pixels<R: Rng + ?Sized>(
    pixels: &Tensor,
    original: (u32, u32),
    bucket: (u32, u32),
    rng: &mut R,
) -> Result<(Tensor, MicroCond)> {
    if pixels.rank() != 3 || pixels.dim(1) == 0 || pixels.dim(2) == 0 {
        return Err(Error::data(format!("pixels {:?} not [c, h, w]", pixels.shape())));
    }
    let cond = sample_train_conditioning(original, bucket, rng)?;
    let (rh, rw) = resize_to_cover(original, bucket);
    let resized = image_io::resize(pixels, rh as usize, rw as usize);
    let out = image_io::crop(
        &resized,
        cond.crop.0 as usize,
        cond.crop.1 as usize,
        bucket.0 as usize,
        bucket.1 as usize,
    )?;
    Ok((out, cond))
}

/// [`prepare_example`] that logs and returns `None` on failure.
pub fn prepare_or_skip<R: Rng + ?Sized>(
    entry: &ManifestEntry,
    bucket: (u32, u32),
    rng: &mut R,
) -> Option<(Tensor, MicroCond)> {
    match prepare_example(entry, bucket, rng) {
        Ok(v) => Some(v),
        Err(e) => {
            log::warn!("skipping {:?}: {e}", entry.id);
            None
        }
    }
}

/// Bucket index of every manifest entry.
pub fn assign_all(manifest: &DatasetManifest, buckets: &BucketSet) -> Result<Vec<usize>> {
    manifest
        .entries
        .iter()
        .map(|e| assign_bucket(e.h_original, e.w_original, buckets))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub bucket: usize,
    /// Manifest entry indices.
    pub entries: Vec<usize>,
}

/// One epoch of bucket-homogeneous batches.
///
/// Entries are shuffled inside their bucket and chunked; a short final chunk
/// is topped up by resampling from the same bucket. Non-empty buckets are
/// visited in a shuffled round-robin order, fixed for the epoch, until all
/// are exhausted.
pub fn make_batch_schedule<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    buckets: &BucketSet,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, b) in assign_all(manifest, buckets)?.into_iter().enumerate() {
        members.entry(b).or_default().push(i);
    }
    let mut queues: Vec<(usize, std::vec::IntoIter<Vec<usize>>)> = Vec::new();
    for (bucket, mut items) in members {
        items.shuffle(rng);
        let mut chunks: Vec<Vec<usize>> = items.chunks(batch_size).map(<[usize]>::to_vec).collect();
        let last = chunks.last_mut().unwrap();
        while last.len() < batch_size {
            last.push(items[rng.gen_range(0..items.len())]);
        }
        queues.push((bucket, chunks.into_iter()));
    }
    queues.shuffle(rng);
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for (bucket, q) in queues.iter_mut() {
            if let Some(entries) = q.next() {
                out.push(Batch {
                    bucket: *bucket,
                    entries,
                });
            }
        }
        if out.len() == before {
            return Ok(out);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeHistogram {
    pub fraction_below: f64,
    /// Shared bin edges for heights and widths (`bins + 1` values).
    pub edges: Vec<u32>,
    /// `counts[i][j]`: entries with height in bin `i` and width in bin `j`.
    pub counts: Vec<Vec<usize>>,
}

pub const HISTOGRAM_BINS: usize = 16;

/// Fraction of entries whose shorter side is below `threshold`, plus a joint
/// height/width histogram over [`HISTOGRAM_BINS`] equal-width bins.
pub fn size_histogram(manifest: &DatasetManifest, threshold: u32) -> Result<SizeHistogram> {
    if manifest.is_empty() {
        return Err(Error::data("empty manifest"));
    }
    let n = manifest.len();
    let below = manifest
        .entries
        .iter()
        .filter(|e| e.h_original.min(e.w_original) < threshold)
        .count();
    let max = manifest
        .entries
        .iter()
        .map(|e| e.h_original.max(e.w_original))
        .max()
        .unwrap();
    let width = max.div_ceil(HISTOGRAM_BINS as u32).max(1);
    let edges = (0..=HISTOGRAM_BINS as u32).map(|i| i * width).collect();
    let mut counts = vec![vec![0; HISTOGRAM_BINS]; HISTOGRAM_BINS];
    let bin = |v: u32| (((v - 1) / width) as usize).min(HISTOGRAM_BINS - 1);
    for e in &manifest.entries {
        counts[bin(e.h_original)][bin(e.w_original)] += 1;
    }
    Ok(SizeHistogram {
        fraction_below: below as f64 / n as f64,
        edges,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn entry(id: usize, h: u32, w: u32) -> ManifestEntry {
        ManifestEntry {
            id: format!("e{id}"),
            h_original: h,
            w_original: w,
            source: Source::Raw(Tensor::uniform(&[1, h as usize, w as usize], 0.5, &mut rng(id as u64))),
            caption: String::new(),
        }
    }

    #[test]
    fn bucket_sized_source_is_unchanged() {
        let e = entry(0, 16, 8);
        for seed in 0..5 {
            let (px, cond) = prepare_example(&e, (16, 8), &mut rng(seed)).unwrap();
            assert_eq!(cond, MicroCond::new((16, 8), (0, 0), (16, 8)));
            assert_eq!(&px, &e.source.load().unwrap());
        }
    }

    #[test]
    fn wide_source_crops_horizontally() {
        let e = entry(1, 8, 16);
        let mut lefts = std::collections::BTreeSet::new();
        for seed in 0..200 {
            let (px, cond) = prepare_example(&e, (8, 8), &mut rng(seed)).unwrap();
            assert_eq!(px.shape(), &[1, 8, 8]);
            assert_eq!(cond.size, (8, 16));
            assert_eq!(cond.crop.0, 0);
            let full = e.source.load().unwrap();
            let expect = image_io::crop(&full, 0, cond.crop.1 as usize, 8, 8).unwrap();
            assert_eq!(px, expect);
            lefts.insert(cond.crop.1);
        }
        assert_eq!(lefts, (0..=8).collect());
    }

    #[test]
    fn size_echoes_manifest_after_rescale() {
        let e = entry(2, 40, 20);
        let (px, cond) = prepare_example(&e, (8, 8), &mut rng(0)).unwrap();
        assert_eq!(px.shape(), &[1, 8, 8]);
        assert_eq!(cond.size, (40, 20));
        assert!(cond.crop.0 <= 8 && cond.crop.1 == 0);
    }

    #[test]
    fn undecodable_source_is_skipped() {
        let mut e = entry(3, 4, 4);
        e.source = Source::Inline(vec![0, 1, 2]);
        assert!(matches!(prepare_example(&e, (4, 4), &mut rng(0)), Err(Error::Data(_))));
        assert!(prepare_or_skip(&e, (4, 4), &mut rng(0)).is_none());
    }

    #[test]
    fn one_bucket_is_plain_batching() {
        let m = DatasetManifest::new((0..10).map(|i| entry(i, 4, 4)).collect()).unwrap();
        let b = BucketSet::single(4, 4);
        let s = make_batch_schedule(&m, &b, 3, &mut rng(0)).unwrap();
        assert_eq!(s.len(), 4);
        let mut seen: Vec<usize> = s.iter().flat_map(|b| b.entries.clone()).collect();
        assert_eq!(seen.len(), 12);
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn two_equal_buckets_alternate() {
        let mut entries: Vec<_> = (0..8).map(|i| entry(i, 4, 8)).collect();
        entries.extend((8..16).map(|i| entry(i, 8, 4)));
        let m = DatasetManifest::new(entries).unwrap();
        let b = BucketSet {
            buckets: vec![(4, 8), (8, 4)],
            target_area: 32,
            step: 4,
        };
        let s = make_batch_schedule(&m, &b, 2, &mut rng(1)).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.windows(2).all(|p| p[0].bucket != p[1].bucket));
        for batch in &s {
            let want = b.buckets[batch.bucket];
            assert!(batch
                .entries
                .iter()
                .all(|&i| (m.entries[i].h_original, m.entries[i].w_original) == want));
        }
        assert!(make_batch_schedule(&m, &b, 0, &mut rng(1)).is_err());
    }

    #[test]
    fn histogram_fractions() {
        let mut entries: Vec<_> = (0..39).map(|i| entry(i, 100, 300)).collect();
        entries.extend((39..100).map(|i| entry(i, 256, 400)));
        let m = DatasetManifest::new(entries).unwrap();
        assert!((size_histogram(&m, 256).unwrap().fraction_below - 0.39).abs() < 1e-12);
        assert_eq!(size_histogram(&m, 0).unwrap().fraction_below, 0.0);
        assert_eq!(size_histogram(&m, 100).unwrap().fraction_below, 0.0);
        let h = size_histogram(&m, 0).unwrap();
        assert_eq!(h.counts.iter().flatten().sum::<usize>(), 100);
        assert!(size_histogram(&DatasetManifest::default(), 1).is_err());
    }
}
