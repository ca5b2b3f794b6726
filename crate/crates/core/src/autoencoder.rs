//! Small convolutional autoencoder that defines the latent space, plus the
//! reconstruction metrics used to compare autoencoders.

use microdiff_nn::layers::Conv2d;
use microdiff_nn::{clip_grad_norm, Adam, AdamState, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::rng::stream;
use crate::train::ema_update;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub in_channels: usize,
    pub latent_channels: usize,
    pub downsample_factor: usize,
    pub base_channels: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            latent_channels: 4,
            downsample_factor: 4,
            base_channels: 16,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.downsample_factor) {
            return Err(Error::invalid(format!(
                "downsample_factor must be 2, 4 or 8, got {}",
                self.downsample_factor
            )));
        }
        if self.in_channels == 0 || self.latent_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("autoencoder channel counts must be positive"));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }
}

#[derive(Clone, Debug)]
struct Net {
    enc_in: Conv2d,
    enc: Vec<(Conv2d, Conv2d)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec: Vec<(Conv2d, Conv2d)>,
    dec_out: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    config: AutoencoderConfig,
    params: ParamStore,
    net: Net,
    /// Multiplier applied to encoder outputs so latents have roughly unit scale.
    pub latent_scale: f64,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(config: AutoencoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let base = config.base_channels;
        let width = |i: usize| base << i;
        let enc_in = Conv2d::new(&mut s, "enc.in", config.in_channels, base, 3, 1, 1.0, rng);
        let enc = (0..config.levels())
            .map(|i| {
                (
                    Conv2d::new(&mut s, &format!("enc.{i}.down"), width(i), width(i + 1), 3, 2, 1.0, rng),
                    Conv2d::new(&mut s, &format!("enc.{i}.conv"), width(i + 1), width(i + 1), 3, 1, 1.0, rng),
                )
            })
            .collect();
        let top = width(config.levels());
        let enc_out = Conv2d::new(&mut s, "enc.out", top, config.latent_channels, 3, 1, 1.0, rng);
        let dec_in = Conv2d::new(&mut s, "dec.in", config.latent_channels, top, 3, 1, 1.0, rng);
        let dec = (0..config.levels())
            .rev()
            .map(|i| {
                (
                    Conv2d::new(&mut s, &format!("dec.{i}.up"), width(i + 1), width(i), 3, 1, 1.0, rng),
                    Conv2d::new(&mut s, &format!("dec.{i}.conv"), width(i), width(i), 3, 1, 1.0, rng),
                )
            })
            .collect();
        let dec_out = Conv2d::new(&mut s, "dec.out", base, config.in_channels, 3, 1, 1.0, rng);
        Ok(Self {
            config,
            params: s,
            net: Net {
                enc_in,
                enc,
                enc_out,
                dec_in,
                dec,
                dec_out,
            },
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::shape("autoencoder parameter layout mismatch"));
        }
        self.params = params;
        Ok(())
    }

    fn check(&self, x: &Tensor, channels: usize, multiple: usize) -> Result<()> {
        if x.rank() != 4 || x.dim(1) != channels || x.dim(2) % multiple != 0 || x.dim(3) % multiple != 0 {
            return Err(Error::shape(format!(
                "expected [n, {channels}, h, w] with h, w divisible by {multiple}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    fn encode_graph(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = self.net.enc_in.forward(g, x);
        h = g.silu(h);
        for (down, conv) in &self.net.enc {
            h = down.forward(g, h);
            h = g.silu(h);
            let r = conv.forward(g, h);
            let r = g.silu(r);
            h = g.add(h, r);
        }
        let z = self.net.enc_out.forward(g, h);
        g.scale(z, self.latent_scale)
    }

    fn decode_graph(&self, g: &mut Graph<'_>, z: Var) -> Var {
        let z = g.scale(z, 1.0 / self.latent_scale);
        let mut h = self.net.dec_in.forward(g, z);
        h = g.silu(h);
        for (up, conv) in &self.net.dec {
            h = g.upsample2x(h);
            h = up.forward(g, h);
            h = g.silu(h);
            let r = conv.forward(g, h);
            let r = g.silu(r);
            h = g.add(h, r);
        }
        self.net.dec_out.forward(g, h)
    }

    /// `[n, in, h, w] -> [n, latent, h / f, w / f]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x, self.config.in_channels, self.config.downsample_factor)?;
        let mut g = Graph::new(&self.params);
        let xv = g.constant(x.clone());
        let z = self.encode_graph(&mut g, xv);
        Ok(g.value(z).clone())
    }

    /// `[n, latent, h, w] -> [n, in, h * f, w * f]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z, self.config.latent_channels, 1)?;
        let mut g = Graph::new(&self.params);
        let zv = g.constant(z.clone());
        let x = self.decode_graph(&mut g, zv);
        Ok(g.value(x).clone())
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    pub fn to_checkpoint(&self, ema: Option<&ParamStore>) -> Result<Checkpoint> {
        let meta = AeMeta {
            kind: "autoencoder".into(),
            config: self.config.clone(),
            latent_scale: self.latent_scale,
        };
        let mut ck = Checkpoint::new(&meta)?;
        ck.insert_store("params", &self.params);
        if let Some(ema) = ema {
            ck.insert_store("ema", ema);
        }
        Ok(ck)
    }

    /// Loads the EMA weights when present and `prefer_ema` is set.
    pub fn from_checkpoint(ck: &Checkpoint, prefer_ema: bool) -> Result<Self> {
        let meta: AeMeta = ck.metadata()?;
        if meta.kind != "autoencoder" {
            return Err(Error::format(format!("expected an autoencoder checkpoint, got {:?}", meta.kind)));
        }
        let mut ae = Self::new(meta.config, &mut crate::rng::rng(0))?;
        let group = if prefer_ema && ck.has_group("ema") { "ema" } else { "params" };
        ae.set_params(ck.store(group)?)?;
        ae.latent_scale = meta.latent_scale;
        Ok(ae)
    }
}

#[derive(Serialize, Deserialize)]
struct AeMeta {
    kind: String,
    config: AutoencoderConfig,
    latent_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub steps: usize,
    /// Reproduces the large- versus small-batch comparison as a toggle.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            learning_rate: 1e-3,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AeTrainResult {
    pub model: Autoencoder,
    pub ema: ParamStore,
    pub losses: Vec<f64>,
}

/// MSE training on `images` (each `[c, h, w]` in `[0, 1]`, equal shapes),
/// mapped to `[-1, 1]`. Sets `latent_scale` from the EMA encoder so latents
/// have unit standard deviation.
pub fn train_autoencoder(config: AutoencoderConfig, train: &AeTrainConfig, images: &[Tensor]) -> Result<AeTrainResult> {
    if images.is_empty() || train.batch_size == 0 {
        return Err(Error::invalid("autoencoder training needs images and batch_size >= 1"));
    }
    let mut model = Autoencoder::new(config, &mut stream(train.seed, &[0]))?;
    let mut ema = model.params.clone();
    let adam = Adam::new(train.learning_rate);
    let mut state = AdamState::new(&model.params);
    let mut losses = Vec::with_capacity(train.steps);
    let data: Vec<Tensor> = images.iter().map(|t| t.map(|v| 2.0 * v - 1.0)).collect();
    let mut order: Vec<usize> = Vec::new();
    for step in 0..train.steps {
        let mut rng = stream(train.seed, &[1, step as u64]);
        if order.len() < train.batch_size {
            let mut fresh: Vec<usize> = (0..data.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<Tensor> = order.drain(..train.batch_size.min(order.len())).map(|i| data[i].clone()).collect();
        let x = Tensor::stack(&batch);
        let n = x.dim(0);
        let per = 1.0 / x.item_len() as f64;
        let mut g = Graph::new(&model.params);
        let xv = g.constant(x.clone());
        let z = model.encode_graph(&mut g, xv);
        let y = model.decode_graph(&mut g, z);
        let loss = g.weighted_sq_err(y, x, vec![per; n]);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: "autoencoder loss".into(),
            });
        }
        let mut grads = g.backward(loss).into_param_grads(model.params.len());
        clip_grad_norm(&mut grads, 1.0);
        adam.step(&mut state, &mut model.params, &grads);
        ema_update(&mut ema, &model.params, train.ema_decay)?;
        losses.push(value);
    }
    let mut probe = model.clone();
    probe.params = ema.clone();
    let take: Vec<Tensor> = data.iter().take(64).cloned().collect();
    let z = probe.encode(&Tensor::stack(&take))?;
    let std = (z.sq_norm() / z.numel() as f64 - z.mean().powi(2)).sqrt();
    model.latent_scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
    Ok(AeTrainResult { model, ema, losses })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    /// `+inf` for a perfect reconstruction.
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

/// PSNR (peak 1), SSIM and MSE for images in `[0, 1]`, shaped `[c, h, w]`
/// or `[n, c, h, w]`.
pub fn recon_metrics(x: &Tensor, x_hat: &Tensor) -> Result<ReconMetrics> {
    if x.shape() != x_hat.shape() || x.rank() < 2 {
        return Err(Error::shape(format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let mse = x.sub(x_hat).sq_norm() / x.numel() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() };
    let r = x.rank();
    let (h, w) = (x.dim(r - 2), x.dim(r - 1));
    let planes = x.numel() / (h * w);
    let ssim = (0..planes)
        .map(|p| {
            let a = &x.data()[p * h * w..(p + 1) * h * w];
            let b = &x_hat.data()[p * h * w..(p + 1) * h * w];
            ssim_plane(a, b, h, w)
        })
        .sum::<f64>()
        / planes as f64;
    Ok(ReconMetrics { psnr, ssim, mse })
}

/// Mean SSIM over valid positions of an 11-tap (sigma 1.5) Gaussian window,
/// shrunk to fit small images.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let size = 11.min(h).min(w);
    let size = if size % 2 == 0 { size - 1 } else { size };
    let half = (size / 2) as f64;
    let mut kernel: Vec<f64> = (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let ks: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= ks);
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (di, ki) in kernel.iter().enumerate() {
                for (dj, kj) in kernel.iter().enumerate() {
                    let k = ki * kj;
                    let idx = (i + di) * w + j + dj;
                    let (va, vb) = (a[idx], b[idx]);
                    ma += k * va;
                    mb += k * vb;
                    saa += k * va * va;
                    sbb += k * vb * vb;
                    sab += k * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (oh * ow) as f64
}
