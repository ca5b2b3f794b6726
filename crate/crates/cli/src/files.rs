//! Output directories, sidecars, raw float dumps and image directories.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use microdiff::autoencoder::Autoencoder;
use microdiff::checkpoint::Checkpoint;
use microdiff::data::image_io;
use microdiff::sidecar::Sidecar;
use microdiff::train::{LatentInfo, TrainConfig, TrainState};
use microdiff_nn::Tensor;

/// Bad command-line input that clap cannot catch. Maps to exit code 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn out_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Sidecar opened with `command` and the tool version.
pub fn sidecar(command: &str) -> Sidecar {
    let mut s = Sidecar::new();
    s.set("command", command).set("version", env!("CARGO_PKG_VERSION"));
    s
}

pub fn save_sidecar(path: &Path, s: &Sidecar) -> Result<()> {
    s.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn display(p: &Path) -> String {
    p.display().to_string()
}

pub const RAW_MAGIC: &[u8; 4] = b"MDRW";

/// `MDRW`, `u32` rank, `u64` dims, then little-endian `f64` values.
pub fn write_raw(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * (t.rank() + t.numel()));
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn read_raw(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let bad = || microdiff::Error::Format(format!("{}: not a raw tensor dump", path.display()));
    if bytes.len() < 8 || &bytes[..4] != RAW_MAGIC {
        return Err(bad().into());
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let head = 8 + 8 * rank;
    if bytes.len() < head {
        return Err(bad().into());
    }
    let shape: Vec<usize> = bytes[8..head]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != head + 8 * n {
        return Err(bad().into());
    }
    let data = bytes[head..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(shape, data))
}

/// Writes `<stem>.png`, and `<stem>.raw` when `raw` is set.
pub fn write_image(dir: &Path, stem: &str, img: &Tensor, raw: bool) -> Result<PathBuf> {
    let png = dir.join(format!("{stem}.png"));
    image_io::save_image(&png, img)?;
    if raw {
        write_raw(&dir.join(format!("{stem}.raw")), img)?;
    }
    Ok(png)
}

/// Images of a directory keyed by file stem, in name order. A `.raw` dump
/// replaces the same-stem PNG/PNM when `prefer_raw` is set.
pub fn read_image_dir(dir: &Path, prefer_raw: bool) -> Result<Vec<(String, Tensor)>> {
    let mut files: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let (Some(stem), Some(ext)) = (path.file_stem(), path.extension()) else {
            continue;
        };
        let slot = files.entry(stem.to_string_lossy().into_owned()).or_default();
        match ext.to_string_lossy().to_ascii_lowercase().as_str() {
            "png" | "pgm" | "ppm" | "pnm" => slot.0 = Some(path),
            "raw" => slot.1 = Some(path),
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (stem, (image, raw)) in files {
        let t = match (image, raw) {
            (_, Some(r)) if prefer_raw => read_raw(&r)?,
            (Some(i), _) => image_io::load_image(&i)?,
            (None, Some(r)) => read_raw(&r)?,
            (None, None) => continue,
        };
        out.push((stem, t));
    }
    if out.is_empty() {
        return Err(microdiff::Error::Data(format!("no images in {}", dir.display())).into());
    }
    Ok(out)
}

/// A trained denoiser with its training config and latent bookkeeping.
pub struct Model {
    pub config: TrainConfig,
    pub state: TrainState,
    pub latent: Option<LatentInfo>,
}

pub fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (config, state, latent) = TrainState::from_checkpoint(&ck).with_context(|| format!("loading {}", path.display()))?;
    Ok(Model { config, state, latent })
}

pub fn load_autoencoder(path: &Path) -> Result<Autoencoder> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Autoencoder::from_checkpoint(&ck, true).with_context(|| format!("loading {}", path.display()))?)
}

/// Loads the autoencoder a latent model needs and checks it is the one the
/// model was trained with.
pub fn matching_autoencoder(model: &Model, path: Option<&Path>) -> Result<Option<Autoencoder>> {
    match (&model.latent, path) {
        (None, None) => Ok(None),
        (None, Some(_)) => bail!(usage("checkpoint is a pixel-space model; drop --autoencoder")),
        (Some(_), None) => bail!(usage("checkpoint is a latent model; pass --autoencoder")),
        (Some(info), Some(p)) => {
            let ae = load_autoencoder(p)?;
            if ae.params().fingerprint() != info.autoencoder_fingerprint {
                bail!(usage(format!(
                    "{} is not the autoencoder this model was trained with",
                    p.display()
                )));
            }
            Ok(Some(ae))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![1, 2, 3], vec![0.1, -2.0, 1e-300, 3.5, f64::MAX, 0.0]);
        let p = dir.path().join("x.raw");
        write_raw(&p, &t).unwrap();
        assert_eq!(read_raw(&p).unwrap(), t);
        std::fs::write(&p, b"MDRW\x01\0\0\0").unwrap();
        assert!(read_raw(&p).is_err());
    }

    #[test]
    fn image_dir_prefers_raw_on_request() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![1, 1, 2], vec![0.1234, 0.9]);
        write_image(dir.path(), "a", &t, true).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let raw = read_image_dir(dir.path(), true).unwrap();
        assert_eq!(raw, vec![("a".to_string(), t.clone())]);
        let png = read_image_dir(dir.path(), false).unwrap();
        assert!((png[0].1.data()[0] - 0.1234).abs() < 1.0 / 255.0 && png[0].1 != t);
        assert!(read_image_dir(tempfile::tempdir().unwrap().path(), false).is_err());
    }
}
