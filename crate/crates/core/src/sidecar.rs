//! Line-delimited `key=value` records written next to every output.
//!
//! ```text
//! microdiff-sidecar v1
//! command=sample
//! seed=3
//! ```
//!
//! Keys are unique and kept in insertion order. Values may not contain
//! newlines.

use std::path::Path;

use crate::embedding::MicroCond;
use crate::sample::{RefineSpec, SampleRequest, Sampler};
use crate::{Error, Result};

pub const SIDECAR_HEADER: &str = "microdiff-sidecar v1";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Sidecar {
    pub entries: Vec<(String, String)>,
}

impl Sidecar {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string().replace('\n', " ");
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::format(format!("sidecar lacks {key:?}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::format(format!("sidecar {key}={raw:?} does not parse")))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{SIDECAR_HEADER}\n");
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == SIDECAR_HEADER => {}
            other => return Err(Error::format(format!("bad sidecar header {other:?}"))),
        }
        let mut out = Self::new();
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("sidecar line {}: missing '='", n + 2)))?;
            if out.get(k).is_some() {
                return Err(Error::format(format!("sidecar key {k:?} repeated")));
            }
            out.entries.push((k.to_string(), v.to_string()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn pair(v: (u32, u32)) -> String {
    format!("{}x{}", v.0, v.1)
}

/// Parses `HxW` (also used for `T,L` with `sep = ','`).
pub fn parse_pair(s: &str, sep: char) -> Result<(u32, u32)> {
    let (a, b) = s
        .split_once(sep)
        .ok_or_else(|| Error::invalid(format!("expected A{sep}B, got {s:?}")))?;
    let p = |x: &str| {
        x.trim()
            .parse::<u32>()
            .map_err(|_| Error::invalid(format!("bad integer {x:?} in {s:?}")))
    };
    Ok((p(a)?, p(b)?))
}

impl SampleRequest {
    /// Writes every request field under its own key into `out`.
    pub fn write_sidecar(&self, out: &mut Sidecar) {
        out.set("prompt", &self.prompt)
            .set("orig_size", pair(self.microcond.size))
            .set("crop", format!("{},{}", self.microcond.crop.0, self.microcond.crop.1))
            .set("target", pair(self.microcond.target))
            .set("guidance_w", self.guidance_w)
            .set("steps", self.steps)
            .set("sampler", self.sampler)
            .set("seed", self.seed);
        match &self.refine {
            Some(r) => {
                out.set("refine_checkpoint", &r.checkpoint).set("refine_levels", r.refine_levels);
            }
            None => {
                out.set("refine_levels", 0);
            }
        }
    }

    pub fn from_sidecar(s: &Sidecar) -> Result<Self> {
        let refine_levels: usize = s.parse_value("refine_levels")?;
        let refine = match s.get("refine_checkpoint") {
            Some(c) => Some(RefineSpec {
                checkpoint: c.to_string(),
                refine_levels,
            }),
            None => None,
        };
        Ok(Self {
            prompt: s.require("prompt")?.to_string(),
            microcond: MicroCond::new(
                parse_pair(s.require("orig_size")?, 'x')?,
                parse_pair(s.require("crop")?, ',')?,
                parse_pair(s.require("target")?, 'x')?,
            ),
            guidance_w: s.parse_value("guidance_w")?,
            steps: s.parse_value("steps")?,
            sampler: s.require("sampler")?.parse::<Sampler>()?,
            seed: s.parse_value("seed")?,
            refine,
        })
    }
}
