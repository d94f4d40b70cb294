//! Parameter checkpoint container shared by the denoiser and splat models.
//!
//! ```text
//! "GVCK"            4 bytes magic
//! version           u32 LE (= 1)
//! header_len        u64 LE
//! header            JSON, header_len bytes
//! blob              f32 LE values, tensors back to back
//! ```
//!
//! The header holds `kind`, the model config, seeds, the iteration count and
//! a manifest of `{name, shape, offset, count}` where `offset` counts f32
//! values from the start of the blob.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsio::write_atomic;

const MAGIC: &[u8; 4] = b"GVCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub kind: String,
    pub config: Value,
    pub seeds: Value,
    pub iteration: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub seeds: Value,
    pub iteration: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::data(format!("checkpoint has no tensor {name}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::data(format!("checkpoint holds a {} model, expected {kind}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            let count: usize = t.shape.iter().product();
            if count != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {} has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
            entries.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset, count });
            offset += count;
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            seeds: self.seeds.clone(),
            iteration: self.iteration,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::data(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::data(format!("invalid checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing GVCK magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let blob = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.shape.iter().product::<usize>() != e.count {
                return Err(bad(&format!("tensor {} count does not match its shape", e.name)));
            }
            let raw = blob
                .get(4 * e.offset..4 * (e.offset + e.count))
                .ok_or_else(|| bad(&format!("tensor {} runs past the end of the file", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.push(NamedTensor { name: e.name, shape: e.shape, data });
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            seeds: header.seeds,
            iteration: header.iteration,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let ck = Checkpoint {
            kind: "test".into(),
            config: serde_json::json!({"width": 3}),
            seeds: serde_json::json!({"init": 7}),
            iteration: 12,
            tensors: vec![
                NamedTensor { name: "a".into(), shape: vec![2, 2], data: vec![1.0, -2.5, 0.125, 3.0] },
                NamedTensor { name: "b".into(), shape: vec![1], data: vec![0.5] },
            ],
        };
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(ck.expect_kind("other").is_err());
    }
}
