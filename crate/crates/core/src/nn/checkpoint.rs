//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic, a little-endian `u64` header length, a JSON
//! header `{format, meta, tensors: [{name, rows, cols}]}`, then every tensor's
//! values as little-endian binary64 in header order. Values round-trip
//! bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

pub const CHECKPOINT_FORMAT: &str = "crossview-checkpoint/1";
const MAGIC: &[u8; 8] = b"XVCKPT\0\x01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format: CHECKPOINT_FORMAT.to_string(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let total: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self, NnError> {
        let bad = |reason: String| NnError::BadCheckpoint {
            path: origin.to_string(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(format!(
                "format `{}`, expected `{CHECKPOINT_FORMAT}`",
                header.format
            )));
        }
        let mut pos = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| bad(format!("truncated data for `{}`", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name, Tensor::from_vec(e.rows, e.cols, data)?));
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, self.to_bytes()).map_err(|source| NnError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = fs::read(path).map_err(|source| NnError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
