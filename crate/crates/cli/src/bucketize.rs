use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{Context, Result};
use microdiff::data::{assign_all, generate_buckets_with_fill, DatasetManifest, DEFAULT_MIN_FILL};

use crate::files::{display, out_dir, save_sidecar, sidecar};

/// Generate the bucket table and assign manifest entries to buckets.
#[derive(clap::Args, Debug)]
pub struct Args {
    /// Dataset manifest; omit to emit only the table.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 1024 * 1024)]
    target_area: u64,
    #[arg(long, default_value_t = 64)]
    step: u32,
    #[arg(long, default_value_t = 512)]
    min_side: u32,
    #[arg(long, default_value_t = 2048)]
    max_side: u32,
    /// Smallest accepted `h*w / target_area`.
    #[arg(long, default_value_t = DEFAULT_MIN_FILL)]
    min_fill: f64,
    #[arg(long)]
    out: PathBuf,
}

pub const ASSIGNMENT_HEADER: &str = "id\th_original\tw_original\tbucket\tbucket_h\tbucket_w";

pub fn run(args: Args) -> Result<()> {
    let buckets = generate_buckets_with_fill(args.target_area, args.step, args.min_side, args.max_side, args.min_fill)?;
    out_dir(&args.out)?;
    let table = buckets.to_table();
    std::fs::write(args.out.join("buckets.tsv"), &table).context("writing buckets.tsv")?;
    print!("{table}");

    let mut meta = sidecar("bucketize");
    meta.set("target_area", args.target_area)
        .set("step", args.step)
        .set("min_side", args.min_side)
        .set("max_side", args.max_side)
        .set("min_fill", args.min_fill)
        .set("buckets", buckets.len());
    if let Some(path) = &args.manifest {
        let manifest = DatasetManifest::load(path).with_context(|| format!("loading {}", path.display()))?;
        let assigned = assign_all(&manifest, &buckets)?;
        let mut out = format!("{ASSIGNMENT_HEADER}\n");
        for (e, b) in manifest.entries.iter().zip(assigned) {
            let (h, w) = buckets.buckets[b];
            writeln!(out, "{}\t{}\t{}\t{b}\t{h}\t{w}", e.id, e.h_original, e.w_original).unwrap();
        }
        std::fs::write(args.out.join("assignments.tsv"), out).context("writing assignments.tsv")?;
        meta.set("manifest", display(path)).set("entries", manifest.len());
        log::info!("assigned {} entries to {} buckets", manifest.len(), buckets.len());
    }
    save_sidecar(&args.out.join("bucketize.txt"), &meta)
}
