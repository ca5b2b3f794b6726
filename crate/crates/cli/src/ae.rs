use std::path::PathBuf;

use anyhow::{Context, Result};
use microdiff::autoencoder::{recon_metrics, train_autoencoder, AeTrainConfig, AutoencoderConfig};
use microdiff::data::{prepare_pixels, DatasetManifest};
use microdiff::rng::stream;
use microdiff::sidecar::parse_pair;
use microdiff::train::TrainData;
use microdiff_nn::Tensor;

use crate::files::{display, out_dir, save_sidecar, sidecar, usage};

/// Train the toy autoencoder on manifest images cropped to one resolution.
#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    manifest: PathBuf,
    /// Training resolution `HxW`; images are resized to cover it and cropped.
    #[arg(long, default_value = "16x16")]
    resolution: String,
    #[arg(long, default_value_t = 4)]
    latent_channels: usize,
    /// 2, 4 or 8.
    #[arg(long, default_value_t = 4)]
    factor: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.99)]
    ema_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let resolution = parse_pair(&args.resolution, 'x')?;
    let manifest = DatasetManifest::load(&args.manifest).with_context(|| format!("loading {}", args.manifest.display()))?;
    let data = TrainData::load(&manifest);
    let mut rng = stream(args.seed, &[2]);
    let mut images = Vec::with_capacity(data.len());
    for (e, px) in data.manifest.entries.iter().zip(&data.pixels) {
        images.push(prepare_pixels(px, (e.h_original, e.w_original), resolution, &mut rng)?.0);
    }
    let channels = images.first().map(|t| t.dim(0)).ok_or_else(|| microdiff::Error::Data("no decodable images".into()))?;
    if images.iter().any(|t| t.dim(0) != channels) {
        return Err(usage("images mix grayscale and colour"));
    }
    let config = AutoencoderConfig {
        in_channels: channels,
        latent_channels: args.latent_channels,
        downsample_factor: args.factor,
        base_channels: args.base_channels,
    };
    config.validate()?;
    let train = AeTrainConfig {
        steps: args.steps,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        ema_decay: args.ema_decay,
        seed: args.seed,
    };
    let result = train_autoencoder(config, &train, &images)?;
    out_dir(&args.out)?;
    let ck = result.model.to_checkpoint(Some(&result.ema))?;
    let path = args.out.join("ae.ckpt");
    ck.save(&path).with_context(|| format!("writing {}", path.display()))?;

    let mut model = result.model.clone();
    model.set_params(result.ema.clone())?;
    let x = Tensor::stack(&images);
    let x_hat = model.reconstruct(&x.map(|v| 2.0 * v - 1.0))?.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
    let m = recon_metrics(&x, &x_hat)?;
    log::info!("reconstruction PSNR {:.2} dB, SSIM {:.4}", m.psnr, m.ssim);

    let mut meta = sidecar("train-ae");
    meta.set("manifest", display(&args.manifest))
        .set("resolution", &args.resolution)
        .set("latent_channels", args.latent_channels)
        .set("factor", args.factor)
        .set("base_channels", args.base_channels)
        .set("steps", args.steps)
        .set("batch_size", args.batch_size)
        .set("lr", args.lr)
        .set("ema_decay", args.ema_decay)
        .set("seed", args.seed)
        .set("images", images.len())
        .set("final_loss", result.losses.last().copied().unwrap_or(f64::NAN))
        .set("psnr", m.psnr)
        .set("ssim", m.ssim)
        .set("latent_scale", model.latent_scale);
    save_sidecar(&args.out.join("train-ae.txt"), &meta)
}
