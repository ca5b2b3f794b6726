use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use microdiff::autoencoder::Autoencoder;
use microdiff::data::image_io;
use microdiff::embedding::MicroCond;
use microdiff::sample::{
    BetaFn, Pipeline, RefineSpec, SampleRequest, Sampler, SdeConfig, DEFAULT_GUIDANCE, DEFAULT_REFINE_LEVELS,
    DEFAULT_STEPS,
};
use microdiff::schedule::NoiseSchedule;
use microdiff::sidecar::{parse_pair, Sidecar};
use microdiff::train::TrainConfig;
use microdiff_nn::Tensor;

use crate::files::{
    display, load_model, matching_autoencoder, out_dir, read_image_dir, save_sidecar, sidecar, usage, write_image, Model,
};

fn parse_sampler(s: &str) -> Result<Sampler, String> {
    s.parse().map_err(|e: microdiff::Error| e.to_string())
}

/// A checkpoint ready to sample from.
struct Loaded {
    model: Model,
    ae: Option<Autoencoder>,
    schedule: NoiseSchedule,
    ema: bool,
}

impl Loaded {
    fn open(checkpoint: &Path, autoencoder: Option<&Path>, weights: &str) -> Result<Self> {
        Self::with_model(load_model(checkpoint)?, autoencoder, weights)
    }

    fn with_model(model: Model, autoencoder: Option<&Path>, weights: &str) -> Result<Self> {
        let ema = match weights {
            "ema" => true,
            "raw" => false,
            w => bail!(usage(format!("--weights must be ema or raw, got {w:?}"))),
        };
        let ae = matching_autoencoder(&model, autoencoder)?;
        let schedule = NoiseSchedule::new(model.config.schedule.clone())?;
        Ok(Self { model, ae, schedule, ema })
    }

    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            model: &self.model.state.model,
            params: if self.ema {
                &self.model.state.ema
            } else {
                self.model.state.model.params()
            },
            text: &self.model.state.text,
            schedule: &self.schedule,
            autoencoder: self.ae.as_ref(),
        }
    }
}

/// The last stage's resolution, or its most square bucket.
fn default_target(cfg: &TrainConfig) -> Result<(u32, u32)> {
    let stage = cfg.stages.last().ok_or_else(|| usage("checkpoint config has no stages; pass --target"))?;
    let buckets = stage.bucket_set()?;
    let square = |&(h, w): &(u32, u32)| (f64::from(h) / f64::from(w)).ln().abs();
    Ok(*buckets
        .buckets
        .iter()
        .min_by(|a, b| square(a).total_cmp(&square(b)))
        .expect("bucket sets are non-empty"))
}

/// Generate images, one seed per image, with a sidecar each.
#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, required_unless_present = "from_sidecar")]
    checkpoint: Option<PathBuf>,
    /// Autoencoder the checkpoint was trained with (latent models only).
    #[arg(long)]
    autoencoder: Option<PathBuf>,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Image `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    /// Guidance strength `w` (0: conditional prediction only).
    #[arg(long, alias = "w", default_value_t = DEFAULT_GUIDANCE)]
    guidance: f64,
    /// ddim, ode (Heun) or sde (Euler-Maruyama).
    #[arg(long, default_value = "ddim", value_parser = parse_sampler)]
    sampler: Sampler,
    /// Constant Langevin strength for `--sampler sde`.
    #[arg(long, default_value_t = 1.0)]
    sde_beta: f64,
    /// `HxW`; defaults to the last training stage's resolution.
    #[arg(long, alias = "size")]
    target: Option<String>,
    /// Original-size conditioning `HxW`; defaults to the target.
    #[arg(long)]
    orig_size: Option<String>,
    /// Crop conditioning `TOP,LEFT`.
    #[arg(long, default_value = "0,0")]
    crop: String,
    /// ema or raw weights.
    #[arg(long, default_value = "ema")]
    weights: String,
    /// Refiner checkpoint applied to every sample.
    #[arg(long)]
    refiner: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_REFINE_LEVELS)]
    refine_levels: usize,
    /// `NxM` conditioning sweep at a single seed instead of `--n` samples.
    #[arg(long)]
    grid: Option<String>,
    /// Conditioning swept across the grid: size or crop.
    #[arg(long, default_value = "size")]
    sweep: String,
    /// `LO,HI` in multiples of the target (size) or fractions of it (crop).
    #[arg(long)]
    sweep_range: Option<String>,
    /// Also write little-endian f64 dumps (`.raw`) next to the PNGs.
    #[arg(long)]
    raw: bool,
    /// Regenerate the single image described by a sample sidecar.
    #[arg(long)]
    from_sidecar: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Shared settings written to every sample sidecar.
struct Setup {
    checkpoint: PathBuf,
    autoencoder: Option<PathBuf>,
    weights: String,
    sde_beta: f64,
    refiner: Option<PathBuf>,
}

impl Setup {
    fn write(&self, s: &mut Sidecar) {
        s.set("checkpoint", display(&self.checkpoint)).set("weights", &self.weights).set("sde_beta", self.sde_beta);
        if let Some(a) = &self.autoencoder {
            s.set("autoencoder", display(a));
        }
    }

    fn read(s: &Sidecar) -> Result<Self> {
        Ok(Self {
            checkpoint: s.require("checkpoint")?.into(),
            autoencoder: s.get("autoencoder").map(PathBuf::from),
            weights: s.require("weights")?.to_string(),
            sde_beta: s.parse_value("sde_beta")?,
            refiner: s.get("refine_checkpoint").map(PathBuf::from),
        })
    }

    fn sde(&self) -> SdeConfig {
        SdeConfig {
            beta: BetaFn::Constant { value: self.sde_beta },
        }
    }
}

struct Models {
    base: Loaded,
    refiner: Option<Loaded>,
}

impl Models {
    fn open(setup: &Setup) -> Result<Self> {
        let base = Loaded::open(&setup.checkpoint, setup.autoencoder.as_deref(), &setup.weights)?;
        let refiner = match &setup.refiner {
            Some(p) => {
                let r = load_model(p)?;
                if r.latent != base.model.latent {
                    bail!(usage("refiner and base model use different latent spaces"));
                }
                Some(Loaded::with_model(r, setup.autoencoder.as_deref(), &setup.weights)?)
            }
            None => None,
        };
        Ok(Self { base, refiner })
    }

    fn render(&self, req: &SampleRequest, sde: &SdeConfig) -> Result<Tensor> {
        let pipe = self.base.pipeline();
        let mut x = pipe.generate(req, 1, sde)?;
        if let (Some(r), Some(spec)) = (&self.refiner, &req.refine) {
            x = r.pipeline().refine(&x, req, spec.refine_levels)?;
        }
        Ok(pipe.to_images(&x)?.remove(0))
    }
}

fn emit(out: &Path, index: usize, img: &Tensor, setup: &Setup, req: &SampleRequest, raw: bool) -> Result<()> {
    let stem = format!("sample_{index:04}");
    write_image(out, &stem, img, raw)?;
    let mut s = sidecar("sample");
    setup.write(&mut s);
    s.set("index", index);
    req.write_sidecar(&mut s);
    save_sidecar(&out.join(format!("{stem}.txt")), &s)
}

pub fn run(args: Args) -> Result<()> {
    out_dir(&args.out)?;
    if let Some(path) = &args.from_sidecar {
        let s = Sidecar::load(path).with_context(|| format!("reading {}", path.display()))?;
        if s.get("command") != Some("sample") {
            bail!(usage(format!("{} is not a sample sidecar", path.display())));
        }
        let setup = Setup::read(&s)?;
        let req = SampleRequest::from_sidecar(&s)?;
        let img = Models::open(&setup)?.render(&req, &setup.sde())?;
        return emit(&args.out, s.parse_value("index")?, &img, &setup, &req, args.raw);
    }

    let setup = Setup {
        checkpoint: args.checkpoint.clone().expect("required by clap"),
        autoencoder: args.autoencoder.clone(),
        weights: args.weights.clone(),
        sde_beta: args.sde_beta,
        refiner: args.refiner.clone(),
    };
    let models = Models::open(&setup)?;
    let target = match &args.target {
        Some(t) => parse_pair(t, 'x')?,
        None => default_target(&models.base.model.config)?,
    };
    let mut req = SampleRequest::new(args.prompt.clone(), target, args.seed);
    req.microcond = MicroCond::new(
        args.orig_size.as_deref().map(|s| parse_pair(s, 'x')).transpose()?.unwrap_or(target),
        parse_pair(&args.crop, ',')?,
        target,
    );
    req.steps = args.steps;
    req.guidance_w = args.guidance;
    req.sampler = args.sampler;
    req.refine = args.refiner.as_ref().map(|p| RefineSpec {
        checkpoint: display(p),
        refine_levels: args.refine_levels,
    });
    req.validate(&models.base.schedule)?;
    let sde = setup.sde();

    if let Some(grid) = &args.grid {
        return sweep(&args, grid, &models, &setup, req);
    }
    for i in 0..args.n {
        let mut r = req.clone();
        r.seed = args.seed + i as u64;
        let img = models.render(&r, &sde)?;
        emit(&args.out, i, &img, &setup, &r, args.raw)?;
    }
    log::info!("wrote {} samples to {}", args.n, args.out.display());
    Ok(())
}

/// Micro-conditioning for each of `cells` grid cells, row-major.
pub fn sweep_values(kind: &str, range: (f64, f64), base: MicroCond, cells: usize) -> Result<Vec<MicroCond>> {
    let (th, tw) = (f64::from(base.target.0), f64::from(base.target.1));
    (0..cells)
        .map(|k| {
            let f = if cells == 1 {
                range.0
            } else {
                range.0 + (range.1 - range.0) * k as f64 / (cells - 1) as f64
            };
            let scaled = ((th * f).round().max(0.0) as u32, (tw * f).round().max(0.0) as u32);
            let mut m = base;
            match kind {
                "size" => m.size = (scaled.0.max(1), scaled.1.max(1)),
                "crop" => m.crop = scaled,
                k => return Err(usage(format!("--sweep must be size or crop, got {k:?}"))),
            }
            Ok(m)
        })
        .collect()
}

fn sweep(args: &Args, grid: &str, models: &Models, setup: &Setup, req: SampleRequest) -> Result<()> {
    let (rows, cols) = parse_pair(grid, 'x')?;
    let (rows, cols) = (rows as usize, cols as usize);
    if rows == 0 || cols == 0 {
        bail!(usage("--grid needs positive dimensions"));
    }
    let range = match &args.sweep_range {
        Some(r) => {
            let (lo, hi) = r.split_once(',').ok_or_else(|| usage("--sweep-range must be LO,HI"))?;
            let p = |v: &str| v.trim().parse::<f64>().map_err(|_| usage(format!("bad number {v:?} in --sweep-range")));
            (p(lo)?, p(hi)?)
        }
        None if args.sweep == "crop" => (0.0, 0.5),
        None => (0.25, 2.0),
    };
    if !(range.0 >= 0.0 && range.1 >= 0.0) {
        bail!(usage("--sweep-range must be non-negative"));
    }
    let conds = sweep_values(&args.sweep, range, req.microcond, rows * cols)?;
    let sde = setup.sde();
    let mut cells = Vec::with_capacity(conds.len());
    let mut table = String::from("cell\trow\tcol\torig_size\tcrop\ttarget\n");
    for (k, m) in conds.iter().enumerate() {
        let mut r = req.clone();
        r.microcond = *m;
        cells.push(models.render(&r, &sde)?);
        writeln!(
            table,
            "{k}\t{}\t{}\t{}x{}\t{},{}\t{}x{}",
            k / cols,
            k % cols,
            m.size.0,
            m.size.1,
            m.crop.0,
            m.crop.1,
            m.target.0,
            m.target.1
        )
        .unwrap();
    }
    let img = image_io::grid(&cells, rows, cols)?;
    write_image(&args.out, "grid", &img, args.raw)?;
    std::fs::write(args.out.join("grid.tsv"), table).context("writing grid.tsv")?;
    let mut s = sidecar("sample");
    setup.write(&mut s);
    s.set("grid", format!("{rows}x{cols}"))
        .set("sweep", &args.sweep)
        .set("sweep_range", format!("{},{}", range.0, range.1));
    req.write_sidecar(&mut s);
    save_sidecar(&args.out.join("grid.txt"), &s)
}

/// Refine existing samples (with their sidecars) using a refiner checkpoint.
#[derive(clap::Args, Debug)]
pub struct RefineArgs {
    #[arg(long)]
    refiner: PathBuf,
    /// Directory written by `microdiff sample`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_REFINE_LEVELS)]
    refine_levels: usize,
    #[arg(long)]
    autoencoder: Option<PathBuf>,
    #[arg(long, default_value = "ema")]
    weights: String,
    /// Read `.raw` dumps instead of PNGs where present, and write them.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
}

pub fn refine(args: RefineArgs) -> Result<()> {
    let refiner = Loaded::open(&args.refiner, args.autoencoder.as_deref(), &args.weights)?;
    let pipe = refiner.pipeline();
    out_dir(&args.out)?;
    let mut done = 0;
    for (stem, img) in read_image_dir(&args.input, args.raw)? {
        let side = args.input.join(format!("{stem}.txt"));
        let Ok(mut s) = Sidecar::load(&side) else {
            log::warn!("skipping {stem}: no readable sidecar");
            continue;
        };
        let mut req = SampleRequest::from_sidecar(&s)?;
        req.refine = Some(RefineSpec {
            checkpoint: display(&args.refiner),
            refine_levels: args.refine_levels,
        });
        req.validate(&refiner.schedule)?;
        let mut x = Tensor::stack(&[img]).map(|v| 2.0 * v - 1.0);
        if let Some(ae) = &refiner.ae {
            x = ae.encode(&x)?;
        }
        let y = pipe.refine(&x, &req, args.refine_levels)?;
        let out = pipe.to_images(&y)?.remove(0);
        write_image(&args.out, &stem, &out, args.raw)?;
        s.set("command", "refine")
            .set("source", display(&args.input.join(&stem)))
            .set("refine_weights", &args.weights);
        if let Some(a) = &args.autoencoder {
            s.set("autoencoder", display(a));
        }
        req.write_sidecar(&mut s);
        save_sidecar(&args.out.join(format!("{stem}.txt")), &s)?;
        done += 1;
    }
    if done == 0 {
        return Err(microdiff::Error::Data(format!("no samples with sidecars in {}", args.input.display())).into());
    }
    log::info!("refined {done} samples into {}", args.out.display());
    Ok(())
}

