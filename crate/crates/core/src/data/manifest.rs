//! Line-delimited dataset manifest.
//!
//! ```text
//! # microdiff-manifest v1
//! <id>\t<h_original>\t<w_original>\t<source>\t<caption>
//! ```
//!
//! `source` is a file path (relative paths resolve against the manifest's
//! directory), `inline:<base64 PNG/PNM bytes>`, or
//! `raw:<c>x<h>x<w>:<base64 little-endian f32 values>`. Captions run to the
//! end of the line; blank lines and further `#` lines are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use byteorder::{ByteOrder, LittleEndian};
use microdiff_nn::Tensor;

use super::image_io;
use crate::{Error, Result};

pub const MANIFEST_HEADER: &str = "# microdiff-manifest v1";

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Path(PathBuf),
    /// Encoded PNG/PNM bytes.
    Inline(Vec<u8>),
    /// Pre-decoded `[c, h, w]` pixels in `[0, 1]`.
    Raw(Tensor),
}

impl Source {
    pub fn load(&self) -> Result<Tensor> {
        match self {
            Source::Path(p) => image_io::load_image(p),
            Source::Inline(bytes) => image_io::decode_image(bytes),
            Source::Raw(t) => Ok(t.clone()),
        }
    }

    fn encode(&self) -> String {
        match self {
            Source::Path(p) => p.display().to_string(),
            Source::Inline(bytes) => format!("inline:{}", B64.encode(bytes)),
            Source::Raw(t) => {
                let mut bytes = vec![0u8; 4 * t.numel()];
                let vals: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
                LittleEndian::write_f32_into(&vals, &mut bytes);
                let s = t.shape();
                format!("raw:{}x{}x{}:{}", s[0], s[1], s[2], B64.encode(bytes))
            }
        }
    }

    fn decode(field: &str, base_dir: Option<&Path>) -> Result<Self> {
        if let Some(b) = field.strip_prefix("inline:") {
            let bytes = B64.decode(b).map_err(|e| Error::data(format!("bad inline base64: {e}")))?;
            return Ok(Source::Inline(bytes));
        }
        if let Some(rest) = field.strip_prefix("raw:") {
            let (dims, b) = rest
                .split_once(':')
                .ok_or_else(|| Error::data("raw source needs <c>x<h>x<w>:<data>"))?;
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::data(format!("bad raw dims {dims:?}"))))
                .collect::<Result<_>>()?;
            if shape.len() != 3 {
                return Err(Error::data(format!("raw dims {dims:?} must be c x h x w")));
            }
            let bytes = B64.decode(b).map_err(|e| Error::data(format!("bad raw base64: {e}")))?;
            let n: usize = shape.iter().product();
            if bytes.len() != 4 * n {
                return Err(Error::data(format!("raw source has {} bytes, expected {}", bytes.len(), 4 * n)));
            }
            let mut vals = vec![0f32; n];
            LittleEndian::read_f32_into(&bytes, &mut vals);
            return Ok(Source::Raw(Tensor::new(shape, vals.into_iter().map(f64::from).collect())));
        }
        let p = PathBuf::from(field);
        Ok(Source::Path(match base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p,
        }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub h_original: u32,
    pub w_original: u32,
    pub source: Source,
    pub caption: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.h_original == 0 || e.w_original == 0 {
                return Err(Error::data(format!("entry {:?} has zero original size", e.id)));
            }
            if e.id.is_empty() || e.id.contains(['\t', '\n', '\r']) {
                return Err(Error::data(format!("invalid id {:?}", e.id)));
            }
            if e.caption.contains(['\n', '\r']) {
                return Err(Error::data(format!("caption of {:?} spans lines", e.id)));
            }
            if !seen.insert(e.id.as_str()) {
                return Err(Error::data(format!("duplicate id {:?}", e.id)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == MANIFEST_HEADER => {}
            _ => return Err(Error::data(format!("manifest must start with {MANIFEST_HEADER:?}"))),
        }
        let mut entries = Vec::new();
        for (no, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.splitn(5, '\t').collect();
            if fields.len() < 4 {
                return Err(Error::data(format!("line {}: expected id, h, w, source, caption", no + 1)));
            }
            let dim = |s: &str| {
                s.parse::<u32>()
                    .map_err(|_| Error::data(format!("line {}: bad size {s:?}", no + 1)))
            };
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                h_original: dim(fields[1])?,
                w_original: dim(fields[2])?,
                source: Source::decode(fields[3], base_dir)?,
                caption: fields.get(4).copied().unwrap_or("").to_string(),
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.id,
                e.h_original,
                e.w_original,
                e.source.encode(),
                e.caption
            );
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
