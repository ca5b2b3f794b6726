use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use microdiff::checkpoint::Checkpoint;
use microdiff::data::DatasetManifest;
use microdiff::train::{LogRecord, TrainConfig, TrainData, TrainState, Trainer};
use serde::{Deserialize, Serialize};

use crate::files::{display, load_autoencoder, out_dir, save_sidecar, sidecar, usage};

/// Training run file: data paths plus the training config under `[train]`.
/// Relative paths resolve against the file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Frozen autoencoder checkpoint for latent-space training.
    #[serde(default)]
    pub autoencoder: Option<PathBuf>,
    /// Write `latest.ckpt` every this many steps (0: only at stage ends).
    #[serde(default)]
    pub checkpoint_every: usize,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        cfg.train.validate()?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        cfg.manifest = resolve(&cfg.manifest);
        cfg.autoencoder = cfg.autoencoder.as_deref().map(resolve);
        Ok(cfg)
    }
}

/// Print a training run file to stdout.
#[derive(clap::Args, Debug)]
pub struct ConfigArgs {
    /// `toy` (single channel, 16-32 px, minutes on a CPU) or `desk` (RGB,
    /// 32-64 px SDXL-shaped backbone).
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "manifest.tsv")]
    manifest: PathBuf,
}

pub fn config(args: ConfigArgs) -> Result<()> {
    let train = match args.preset.as_str() {
        "toy" => TrainConfig::toy(args.seed),
        "desk" => TrainConfig::desk_default(args.seed),
        p => bail!(usage(format!("unknown preset {p:?}; expected toy or desk"))),
    };
    let run = RunConfig {
        manifest: args.manifest,
        autoencoder: None,
        checkpoint_every: 0,
        train,
    };
    print!("{}", toml::to_string(&run)?);
    Ok(())
}

/// Train a denoiser through the configured stages.
#[derive(clap::Args, Debug)]
pub struct Args {
    /// Run file (see `microdiff config`).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run of this config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many steps have been taken in total.
    #[arg(long)]
    max_steps: Option<usize>,
}

fn stage_file(index: usize, name: &str) -> String {
    let name: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("stage-{index}-{name}.ckpt")
}

pub fn run(args: Args) -> Result<()> {
    let run = RunConfig::load(&args.config)?;
    let cfg = &run.train;
    let manifest = DatasetManifest::load(&run.manifest).with_context(|| format!("loading {}", run.manifest.display()))?;
    let data = TrainData::load(&manifest);
    if data.len() < manifest.len() {
        log::warn!("{} of {} entries could not be decoded", manifest.len() - data.len(), manifest.len());
    }
    let ae = run.autoencoder.as_deref().map(load_autoencoder).transpose()?;
    let mut trainer = Trainer::new(cfg, &data, ae.as_ref())?;
    let latent = trainer.latent_info();

    let mut state = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let (ck_cfg, state, ck_latent) = TrainState::from_checkpoint(&ck)?;
            if &ck_cfg != cfg {
                bail!(usage(format!("{} was trained with a different config", path.display())));
            }
            if ck_latent != latent {
                bail!(usage(format!("{} was trained with a different autoencoder", path.display())));
            }
            state
        }
        None => TrainState::init(cfg)?,
    };

    out_dir(&args.out)?;
    std::fs::write(args.out.join("config.toml"), toml::to_string(&run)?).context("writing config.toml")?;
    let mut meta = sidecar("train");
    meta.set("config", display(&args.config))
        .set("manifest", display(&run.manifest))
        .set("entries", trainer.data.len())
        .set("seed", cfg.seed)
        .set("resume", args.resume.as_deref().map(display).unwrap_or_default())
        .set("max_steps", args.max_steps.map(|s| s.to_string()).unwrap_or_default());
    if let Some(p) = &run.autoencoder {
        meta.set("autoencoder", display(p));
    }
    save_sidecar(&args.out.join("train.txt"), &meta)?;

    let log_path = args.out.join("train_log.jsonl");
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut write_err = None;
    let mut log = |r: &LogRecord| {
        if r.stage_step % 100 == 0 {
            log::info!("stage {} step {} loss {:.4}", r.stage, r.stage_step, r.loss);
        }
        let line = serde_json::to_string(r).expect("log record serializes");
        if let Err(e) = writeln!(log_file, "{line}") {
            write_err.get_or_insert(e);
        }
    };

    let save = |state: &TrainState, name: &str| -> Result<()> {
        let path = args.out.join(name);
        state.to_checkpoint(cfg, latent.clone())?.save(&path).with_context(|| format!("writing {}", path.display()))
    };
    let budget = args.max_steps.unwrap_or(usize::MAX);
    while state.stage < cfg.stages.len() && state.global_step < budget {
        let stage = state.stage;
        let mut chunk = budget - state.global_step;
        if run.checkpoint_every > 0 {
            chunk = chunk.min(run.checkpoint_every);
        }
        let stop_at = state.stage_step.saturating_add(chunk);
        trainer.run_stage_until(&mut state, stop_at, &mut log)?;
        save(&state, "latest.ckpt")?;
        if state.stage != stage {
            save(&state, &stage_file(stage, &cfg.stages[stage].name))?;
        }
    }
    // Zero-step stages still advance.
    while state.stage < cfg.stages.len() && cfg.stages[state.stage].steps == 0 {
        let stage = state.stage;
        trainer.run_stage_until(&mut state, 0, &mut log)?;
        save(&state, &stage_file(stage, &cfg.stages[stage].name))?;
    }
    drop(log);
    if let Some(e) = write_err {
        return Err(e).context("writing train_log.jsonl");
    }
    save(&state, "latest.ckpt")?;
    if state.stage == cfg.stages.len() {
        save(&state, "final.ckpt")?;
        log::info!("finished {} steps", state.global_step);
    } else {
        log::info!("stopped at step {} (stage {})", state.global_step, state.stage);
    }
    Ok(())
}
