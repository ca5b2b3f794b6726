//! Fréchet distance over pluggable features, plus the image properties used
//! to check micro-conditioning: high-frequency energy and centre of mass.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use microdiff_nn::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autoencoder::Autoencoder;
use crate::rng::stream;
use crate::{Error, Result};

pub const STATS_MAGIC: &[u8; 4] = b"MDFS";
pub const STATS_VERSION: u32 = 1;

/// Sample mean and unbiased covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `d`, `count`, mean, then the covariance's upper triangle row by row.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(STATS_MAGIC)?;
        w.write_u32::<LittleEndian>(STATS_VERSION)?;
        w.write_u64::<LittleEndian>(self.dim() as u64)?;
        w.write_u64::<LittleEndian>(self.count as u64)?;
        for &v in self.mean.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
        for i in 0..self.dim() {
            for j in i..self.dim() {
                w.write_f64::<LittleEndian>(self.cov[(i, j)])?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STATS_MAGIC {
            return Err(Error::format("not a feature-stats record"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != STATS_VERSION {
            return Err(Error::format(format!("unsupported stats version {version}")));
        }
        let d = r.read_u64::<LittleEndian>()? as usize;
        let count = r.read_u64::<LittleEndian>()? as usize;
        let mut mean = vec![0.0; d];
        r.read_f64_into::<LittleEndian>(&mut mean)?;
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = r.read_f64::<LittleEndian>()?;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            count,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }
}

/// Statistics of an `n x d` feature matrix, `n >= 2`.
pub fn feature_stats(features: &Tensor) -> Result<FeatureStats> {
    if features.rank() != 2 {
        return Err(Error::shape(format!("features must be [n, d], got {:?}", features.shape())));
    }
    let (n, d) = (features.dim(0), features.dim(1));
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 feature rows, got {n}")));
    }
    let x = DMatrix::from_row_slice(n, d, features.data());
    let mean = x.row_mean().transpose();
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centred.transpose() * &centred / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(FeatureStats { mean, cov, count: n })
}

fn check_psd(eig: &SymmetricEigen<f64, nalgebra::Dyn>, what: &str) -> Result<()> {
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = -1e-9 * max.max(1e-300);
    match eig.eigenvalues.iter().find(|&&v| v < floor || !v.is_finite()) {
        Some(v) => Err(Error::invalid(format!("{what} is not positive semi-definite (eigenvalue {v:e})"))),
        None => Ok(()),
    }
}

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    check_psd(&eig, what)?;
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// `Tr((a b)^(1/2))` through the symmetric product `a^(1/2) b a^(1/2)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ra = psd_sqrt(a, "first covariance")?;
    let m = &ra * b * &ra;
    let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    check_psd(&eig, "covariance product")?;
    Ok(eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum())
}

/// A square root of `a b` for PSD `a`, `b` with `a` invertible:
/// `a^(1/2) (a^(1/2) b a^(1/2))^(1/2) a^(-1/2)`.
pub fn sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() || !a.is_square() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let ra = psd_sqrt(a, "first covariance")?;
    let inner = psd_sqrt(&(&ra * b * &ra), "covariance product")?;
    let inv = ra
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("first covariance is singular"))?;
    Ok(&ra * inner * inv)
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, floored at 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != (a.dim(), a.dim()) || b.cov.shape() != (b.dim(), b.dim()) {
        return Err(Error::shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    if a == b {
        return Ok(0.0);
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let cross = trace_sqrt_product(&a.cov, &b.cov)?;
    let d = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if d < -1e-6 {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("Fréchet distance {d:e} below the numerical floor"),
        });
    }
    Ok(d.max(0.0))
}

/// Mean over channels of `[c, h, w]`, or `[h, w]` as is.
fn plane(image: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    match image.shape() {
        &[h, w] => Ok((h, w, image.data().to_vec())),
        &[c, h, w] if c > 0 => {
            let mut out = vec![0.0; h * w];
            for ch in image.data().chunks(h * w) {
                out.iter_mut().zip(ch).for_each(|(o, v)| *o += v / c as f64);
            }
            Ok((h, w, out))
        }
        s => Err(Error::shape(format!("expected [h, w] or [c, h, w], got {s:?}"))),
    }
}

/// Fraction of non-DC spectral power at radial frequency above 0.25
/// cycles/pixel (half the Nyquist rate). Constant images give 0.
pub fn highfreq_energy(image: &Tensor) -> Result<f64> {
    let (h, w, data) = plane(image)?;
    if h * w <= 1 {
        return Err(Error::invalid(format!("image {h}x{w} has no spectrum")));
    }
    let mut buf: Vec<Complex<f64>> = data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row = planner.plan_fft_forward(w);
    for r in buf.chunks_mut(w) {
        row.process(r);
    }
    let col = planner.plan_fft_forward(h);
    let mut column = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = buf[i * w + j];
        }
        col.process(&mut column);
        for i in 0..h {
            buf[i * w + j] = column[i];
        }
    }
    let freq = |k: usize, n: usize| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        k / n as f64
    };
    let (mut total, mut high) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            if i == 0 && j == 0 {
                continue;
            }
            let p = buf[i * w + j].norm_sqr();
            total += p;
            if freq(i, h).hypot(freq(j, w)) > 0.25 {
                high += p;
            }
        }
    }
    let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if total <= 1e-20 * scale * scale * (h * w) as f64 {
        return Ok(0.0);
    }
    Ok(high / total)
}

/// Intensity-weighted centroid `(row, col)`.
pub fn center_of_mass(image: &Tensor) -> Result<(f64, f64)> {
    let (_, w, data) = plane(image)?;
    if data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("center of mass needs finite non-negative intensities"));
    }
    let total: f64 = data.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("center of mass of an all-zero image"));
    }
    let (mut r, mut c) = (0.0, 0.0);
    for (i, v) in data.iter().enumerate() {
        r += v * (i / w) as f64;
        c += v * (i % w) as f64;
    }
    Ok((r / total, c / total))
}

/// Maps same-shaped `[c, h, w]` images in `[0, 1]` to feature rows.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn features(&self, images: &[Tensor]) -> Result<Tensor>;
}

fn check_batch(images: &[Tensor]) -> Result<&[usize]> {
    let first = images.first().ok_or_else(|| Error::data("no images"))?;
    if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::shape(format!("mixed image shapes {:?} and {:?}", first.shape(), bad.shape())));
    }
    Ok(first.shape())
}

/// Flattened pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct RawPixels;

impl FeatureExtractor for RawPixels {
    fn id(&self) -> String {
        "raw".into()
    }

    fn features(&self, images: &[Tensor]) -> Result<Tensor> {
        let shape = check_batch(images)?;
        let d: usize = shape.iter().product();
        Ok(Tensor::stack(images).reshape(&[images.len(), d]))
    }
}

/// Pixels times a fixed Gaussian matrix scaled by `1/sqrt(d_in)`.
#[derive(Clone, Copy, Debug)]
pub struct RandomProjection {
    pub dim: usize,
    pub seed: u64,
}

impl FeatureExtractor for RandomProjection {
    fn id(&self) -> String {
        format!("randproj-{}-{}", self.dim, self.seed)
    }

    fn features(&self, images: &[Tensor]) -> Result<Tensor> {
        let raw = RawPixels.features(images)?;
        let (n, d) = (raw.dim(0), raw.dim(1));
        let p = Tensor::randn(&[d, self.dim], 1.0 / (d as f64).sqrt(), &mut stream(self.seed, &[d as u64]));
        let x = DMatrix::from_row_slice(n, d, raw.data());
        let pm = DMatrix::from_row_slice(d, self.dim, p.data());
        let y = x * pm;
        Ok(Tensor::new(vec![n, self.dim], y.transpose().as_slice().to_vec()))
    }
}

/// Flattened latents of a trained autoencoder.
#[derive(Clone, Copy, Debug)]
pub struct AeFeatures<'a>(pub &'a Autoencoder);

impl FeatureExtractor for AeFeatures<'_> {
    fn id(&self) -> String {
        format!("ae-{:016x}", self.0.params().fingerprint())
    }

    fn features(&self, images: &[Tensor]) -> Result<Tensor> {
        check_batch(images)?;
        let x = Tensor::stack(images).map(|v| 2.0 * v - 1.0);
        let z = self.0.encode(&x)?;
        let n = z.dim(0);
        let d = z.numel() / n;
        Ok(z.reshape(&[n, d]))
    }
}

/// Fréchet distance between two image sets under `extractor`.
pub fn image_frechet(extractor: &dyn FeatureExtractor, a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let sa = feature_stats(&extractor.features(a)?)?;
    let sb = feature_stats(&extractor.features(b)?)?;
    frechet_distance(&sa, &sb)
}
