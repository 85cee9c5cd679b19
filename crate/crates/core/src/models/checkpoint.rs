//! Versioned checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "SXCKPT\0\0" | version u32 | meta_len u32 | meta (UTF-8 key=value lines)
//! | count u32 | per tensor: name_len u32, name, ndim u32, dims u64×ndim, f32×numel
//! ```
//!
//! Tensors are written in name order, so identical contents always give
//! identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::Setting;

const MAGIC: &[u8; 8] = b"SXCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub setting: Setting,
    pub iteration: u64,
    pub master_seed: u64,
    pub preset: String,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        format!(
            "config_hash={}\niteration={}\nmaster_seed={}\npreset={}\nsetting={}\n",
            self.config_hash,
            self.iteration,
            self.master_seed,
            self.preset,
            self.setting.tag()
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{line}`")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("metadata `{k}` is not an integer")))
        };
        Ok(Self {
            config_hash: get("config_hash")?.to_string(),
            setting: Setting::parse(get("setting")?).map_err(|e| Error::Checkpoint(e.to_string()))?,
            iteration: num("iteration")?,
            master_seed: num("master_seed")?,
            preset: get("preset")?.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: BTreeMap<String, StoredTensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn backbone_names(&self) -> Vec<(&str, &[usize])> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("backbone."))
            .map(|(n, t)| (n.as_str(), t.shape.as_slice()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.meta.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta =
            std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let meta = CheckpointMeta::from_text(meta)?;
        let count = r.u32()? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, StoredTensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}
