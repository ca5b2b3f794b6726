use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use microdiff::autoencoder::Autoencoder;
use microdiff::data::{size_histogram, DatasetManifest};
use microdiff::eval::{
    center_of_mass, feature_stats, frechet_distance, highfreq_energy, AeFeatures, FeatureExtractor, FeatureStats,
    RandomProjection, RawPixels,
};
use microdiff::sidecar::Sidecar;
use microdiff_nn::Tensor;

use crate::files::{display, load_autoencoder, out_dir, read_image_dir, save_sidecar, sidecar, usage};

/// Parsed `--extractor` value.
pub enum Extractor {
    Raw,
    Projection(RandomProjection),
    Ae(Box<Autoencoder>),
}

impl Extractor {
    /// `raw`, `randproj:DIM:SEED` or `ae:PATH`.
    pub fn parse(spec: &str) -> Result<Self> {
        if spec == "raw" {
            return Ok(Self::Raw);
        }
        if let Some(rest) = spec.strip_prefix("randproj:") {
            let (dim, seed) = rest.split_once(':').unwrap_or((rest, "0"));
            let bad = || usage(format!("bad extractor {spec:?}; expected randproj:DIM:SEED"));
            return Ok(Self::Projection(RandomProjection {
                dim: dim.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            }));
        }
        if let Some(path) = spec.strip_prefix("ae:") {
            return Ok(Self::Ae(Box::new(load_autoencoder(Path::new(path))?)));
        }
        bail!(usage(format!("unknown extractor {spec:?}; expected raw, randproj:DIM:SEED or ae:PATH")))
    }

    pub fn get(&self) -> Box<dyn FeatureExtractor + '_> {
        match self {
            Self::Raw => Box::new(RawPixels),
            Self::Projection(p) => Box::new(*p),
            Self::Ae(ae) => Box::new(AeFeatures(ae)),
        }
    }
}

/// Feature statistics of an image directory, or a saved `.mdfs` record
/// whose `.mdfs.txt` sidecar names the extractor.
fn load_stats(path: &Path, extractor: &dyn FeatureExtractor, prefer_raw: bool) -> Result<FeatureStats> {
    if path.is_dir() {
        let images: Vec<Tensor> = read_image_dir(path, prefer_raw)?.into_iter().map(|(_, t)| t).collect();
        return Ok(feature_stats(&extractor.features(&images)?)?);
    }
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let stats = FeatureStats::read_from(std::io::BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let side = PathBuf::from(format!("{}.txt", path.display()));
    if let Ok(s) = Sidecar::load(&side) {
        if let Some(id) = s.get("extractor") {
            if id != extractor.id() {
                bail!(usage(format!("{} holds {id} features, not {}", path.display(), extractor.id())));
            }
        }
    }
    Ok(stats)
}

/// Fréchet distance between samples and a reference.
#[derive(clap::Args, Debug)]
pub struct Args {
    /// Image directory or `.mdfs` stats record.
    #[arg(long)]
    samples: PathBuf,
    /// Image directory or `.mdfs` stats record.
    #[arg(long)]
    reference: PathBuf,
    /// raw, randproj:DIM:SEED or ae:PATH.
    #[arg(long, default_value = "raw")]
    extractor: String,
    /// Use `.raw` dumps over PNGs where both exist.
    #[arg(long)]
    raw: bool,
    /// Metrics record path; printed to stdout either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: Args) -> Result<()> {
    let ex = Extractor::parse(&args.extractor)?;
    let f = ex.get();
    let a = load_stats(&args.samples, f.as_ref(), args.raw)?;
    let b = load_stats(&args.reference, f.as_ref(), args.raw)?;
    let d = frechet_distance(&a, &b)?;
    let mut s = sidecar("eval");
    s.set("samples", display(&args.samples))
        .set("reference", display(&args.reference))
        .set("extractor", f.id())
        .set("dim", a.dim())
        .set("count_samples", a.count)
        .set("count_reference", b.count)
        .set("frechet", d);
    print!("{}", s.to_text());
    if let Some(out) = &args.out {
        if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            out_dir(dir)?;
        }
        save_sidecar(out, &s)?;
    }
    Ok(())
}

/// Plot data: per-image statistics, feature stats, or manifest size histograms.
#[derive(clap::Args, Debug)]
pub struct StatsArgs {
    /// Image directory: writes per_image.tsv (high-frequency energy, centre
    /// of mass) and, with `--extractor`, features.mdfs.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    images: Option<PathBuf>,
    #[arg(long)]
    extractor: Option<String>,
    #[arg(long)]
    raw: bool,
    /// Manifest: writes size_histogram.tsv.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Side length below which an image counts as small.
    #[arg(long, default_value_t = 256)]
    threshold: u32,
    #[arg(long)]
    out: PathBuf,
}

pub fn stats(args: StatsArgs) -> Result<()> {
    out_dir(&args.out)?;
    let mut meta = sidecar("stats");
    if let Some(dir) = &args.images {
        let images = read_image_dir(dir, args.raw)?;
        let mut tsv = String::from("image\thighfreq_energy\tcom_row\tcom_col\n");
        for (stem, img) in &images {
            let (r, c) = center_of_mass(img).unwrap_or((f64::NAN, f64::NAN));
            writeln!(tsv, "{stem}\t{}\t{r}\t{c}", highfreq_energy(img)?).unwrap();
        }
        std::fs::write(args.out.join("per_image.tsv"), tsv).context("writing per_image.tsv")?;
        meta.set("images", display(dir)).set("count", images.len());
        if let Some(spec) = &args.extractor {
            let ex = Extractor::parse(spec)?;
            let f = ex.get();
            let tensors: Vec<Tensor> = images.into_iter().map(|(_, t)| t).collect();
            let st = feature_stats(&f.features(&tensors)?)?;
            let path = args.out.join("features.mdfs");
            std::fs::write(&path, st.to_bytes()).with_context(|| format!("writing {}", path.display()))?;
            let mut side = sidecar("stats");
            side.set("images", display(dir)).set("extractor", f.id()).set("count", st.count).set("dim", st.dim());
            save_sidecar(&args.out.join("features.mdfs.txt"), &side)?;
            meta.set("extractor", f.id());
        }
    }
    if let Some(path) = &args.manifest {
        let manifest = DatasetManifest::load(path).with_context(|| format!("loading {}", path.display()))?;
        let h = size_histogram(&manifest, args.threshold)?;
        let mut tsv = String::from("h_lo\th_hi\tw_lo\tw_hi\tcount\n");
        for (i, row) in h.counts.iter().enumerate() {
            for (j, n) in row.iter().enumerate() {
                writeln!(tsv, "{}\t{}\t{}\t{}\t{n}", h.edges[i], h.edges[i + 1], h.edges[j], h.edges[j + 1]).unwrap();
            }
        }
        std::fs::write(args.out.join("size_histogram.tsv"), tsv).context("writing size_histogram.tsv")?;
        meta.set("manifest", display(path))
            .set("threshold", args.threshold)
            .set("fraction_below", h.fraction_below);
        println!("{:.4} of {} entries have a side below {}", h.fraction_below, manifest.len(), args.threshold);
    }
    save_sidecar(&args.out.join("stats.txt"), &meta)
}
