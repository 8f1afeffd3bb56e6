//! Self-describing checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CGANCKPT"
//! version    u32
//! header     u32 length + UTF-8 JSON (architecture, optional trainer state)
//! count      u32
//! tensors    count × { u32 name length, name, u32 rank, rank × u64 dims, f64 values }
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CganError, Result};
use crate::fsio;
use crate::nets::{Architecture, ModelBundle};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CGANCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CganError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| CganError::Checkpoint(format!("header encoding: {e}")))?;
        let payload: usize = self.tensors.iter().map(|(n, t)| n.len() + 8 * (t.len() + t.shape().len()) + 8).sum();
        let mut out = Vec::with_capacity(24 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CganError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CganError::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| CganError::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CganError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                CganError::Checkpoint(format!("tensor `{name}` is too large"))
            })?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| {
                CganError::Checkpoint(format!("tensor `{name}` is too large"))
            })?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(CganError::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read(path)?).map_err(|e| match e {
            CganError::Checkpoint(msg) => CganError::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn tensor_map(&self) -> HashMap<&str, &Tensor> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }
}

impl ModelBundle {
    /// Parameter tensors named `<group>/<parameter>`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for g in self.groups() {
            for (name, t) in self.params(g).iter() {
                out.push((format!("{g}/{name}"), t.clone()));
            }
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                architecture: *self.architecture(),
                state: None,
            },
            tensors: self.named_tensors(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut bundle = ModelBundle::new(ckpt.header.architecture, 0)?;
        let map = ckpt.tensor_map();
        for g in bundle.groups() {
            let prefix = g.to_string();
            bundle
                .params_mut(g)
                .load(|name| map.get(format!("{prefix}/{name}").as_str()).map(|t| (*t).clone()))?;
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Loads and rejects any difference from the expected architecture.
    pub fn load_expecting(path: &Path, expected: &Architecture) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        if &ckpt.header.architecture != expected {
            return Err(CganError::Checkpoint(format!(
                "{}: architecture {:?} does not match expected {:?}",
                path.display(),
                ckpt.header.architecture,
                expected
            )));
        }
        Self::from_checkpoint(&ckpt)
    }
}
