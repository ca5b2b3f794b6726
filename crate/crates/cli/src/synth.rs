use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use microdiff::data::image_io;
use microdiff::data::synthetic::{synthetic_example, SyntheticConfig};
use microdiff::data::{DatasetManifest, ManifestEntry, Source};
use microdiff::sidecar::parse_pair;

use crate::files::{display, out_dir, save_sidecar, sidecar};

/// Render a synthetic size/crop dataset as PNG files plus a manifest.
#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Fraction of images whose short side comes from `--small-sides`.
    #[arg(long, default_value_t = 0.4)]
    small_fraction: f64,
    #[arg(long, default_value = "6,8")]
    small_sides: String,
    #[arg(long, default_value = "24,32")]
    large_sides: String,
    #[arg(long, default_value_t = 0.5)]
    oblong_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    object_scale: f64,
    #[arg(long, default_value_t = 0.08)]
    texture_std: f64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = SyntheticConfig {
        count: args.count,
        channels: args.channels,
        small_fraction: args.small_fraction,
        small_sides: parse_pair(&args.small_sides, ',')?,
        large_sides: parse_pair(&args.large_sides, ',')?,
        oblong_fraction: args.oblong_fraction,
        object_scale: args.object_scale,
        texture_std: args.texture_std,
        seed: args.seed,
    };
    cfg.validate()?;
    let images = args.out.join("images");
    out_dir(&images)?;
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let ((h, w), caption, px) = synthetic_example(&cfg, i);
        let id = format!("syn{i:05}");
        let rel = Path::new("images").join(format!("{id}.png"));
        image_io::save_image(&args.out.join(&rel), &px)?;
        entries.push(ManifestEntry {
            id,
            h_original: h,
            w_original: w,
            source: Source::Path(rel),
            caption,
        });
    }
    let manifest = DatasetManifest::new(entries)?;
    let path = args.out.join("manifest.tsv");
    manifest.save(&path).with_context(|| format!("writing {}", path.display()))?;

    let mut meta = sidecar("synth");
    meta.set("count", cfg.count)
        .set("seed", cfg.seed)
        .set("channels", cfg.channels)
        .set("small_fraction", cfg.small_fraction)
        .set("small_sides", &args.small_sides)
        .set("large_sides", &args.large_sides)
        .set("oblong_fraction", cfg.oblong_fraction)
        .set("object_scale", cfg.object_scale)
        .set("texture_std", cfg.texture_std)
        .set("manifest", display(&path));
    save_sidecar(&args.out.join("synth.txt"), &meta)?;
    log::info!("wrote {} images and {}", cfg.count, path.display());
    Ok(())
}
