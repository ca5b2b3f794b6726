//! Self-describing checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MDCK"  u32 version
//! u64 metadata length, metadata as UTF-8 JSON
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, rank x u64 dims, f64 values
//! ```
//!
//! Parameter stores are kept under a `<group>/` name prefix in insertion
//! order, so a store round-trips with its layout intact.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use microdiff_nn::{ParamStore, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new<M: Serialize>(metadata: &M) -> Result<Self> {
        Ok(Self {
            metadata: serde_json::to_value(metadata).map_err(|e| Error::format(e.to_string()))?,
            tensors: Vec::new(),
        })
    }

    pub fn metadata<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.metadata.clone()).map_err(|e| Error::format(format!("checkpoint metadata: {e}")))
    }

    pub fn insert_store(&mut self, group: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.push((format!("{group}/{name}"), t.clone()));
        }
    }

    pub fn has_group(&self, group: &str) -> bool {
        let prefix = format!("{group}/");
        self.tensors.iter().any(|(n, _)| n.starts_with(&prefix))
    }

    pub fn store(&self, group: &str) -> Result<ParamStore> {
        let prefix = format!("{group}/");
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(&prefix) {
                store.insert(rest, t.clone());
            }
        }
        if store.is_empty() {
            return Err(Error::format(format!("checkpoint has no group {group:?}")));
        }
        Ok(store)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let meta = serde_json::to_vec(&self.metadata).map_err(|e| Error::format(e.to_string()))?;
        w.write_u64::<LittleEndian>(meta.len() as u64)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.rank() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("not a microdiff checkpoint"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.read_u64::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let metadata = serde_json::from_slice(&meta).map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let mut data = vec![0.0; shape.iter().product()];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            tensors.push((name, Tensor::new(shape, data)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }
}
