//! `EMCP` v1: a single-file container for named f32 tensors.
//!
//! Layout:
//!
//! ```text
//! "EMCP" | version: u32 LE (= 1) | manifest_len: u64 LE | manifest JSON | payload
//! ```
//!
//! The manifest is a compact JSON array with one object per tensor, in entry
//! order: `{"name","shape","dtype":"f32","byte_offset","byte_len"}`. Offsets are
//! relative to the start of the payload, which is the concatenation of every
//! tensor's little-endian f32 data.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EMCP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"EMCP\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {0}, expected 1")]
    BadVersion(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported dtype {dtype:?} for tensor {name:?}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name:?}: byte range {offset}..{end} out of bounds (payload is {payload_len} bytes)")]
    OutOfBounds {
        name: String,
        offset: u64,
        end: u64,
        payload_len: u64,
    },
    #[error("tensor {name:?}: shape {shape:?} holds {expected} values but data has {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor {name:?}: non-finite value at index {index}")]
    NonFinite { name: String, index: usize },
    #[error("tensor name is empty")]
    EmptyName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?}: zero-sized dimension in shape {shape:?}")]
    ZeroDim { name: String, shape: Vec<usize> },
    #[error("no tensor named {0:?}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(name: impl Into<String>, value: f32) -> Self {
        Self::new(name, vec![1], vec![value])
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn validate(&self) -> Result<(), CheckpointError> {
        if self.name.is_empty() {
            return Err(CheckpointError::EmptyName);
        }
        if self.shape.contains(&0) {
            return Err(CheckpointError::ZeroDim {
                name: self.name.clone(),
                shape: self.shape.clone(),
            });
        }
        if self.numel() != self.data.len() {
            return Err(CheckpointError::ShapeMismatch {
                name: self.name.clone(),
                shape: self.shape.clone(),
                expected: self.numel(),
                actual: self.data.len(),
            });
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite {
                name: self.name.clone(),
                index,
            });
        }
        Ok(())
    }
}

/// Ordered collection of named tensors. Insertion order is file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    entries: Vec<Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor, or replaces the data of an existing one in place.
    pub fn insert(&mut self, tensor: Tensor) {
        match self.entries.iter_mut().find(|t| t.name == tensor.name) {
            Some(slot) => *slot = tensor,
            None => self.entries.push(tensor),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|t| t.name.as_str())
    }

    /// Checks every invariant: nonempty unique names, shape/data agreement,
    /// no zero dims, finite values.
    pub fn validate(&self) -> Result<(), CheckpointError> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for t in &self.entries {
            t.validate()?;
            if !seen.insert(t.name.as_str()) {
                return Err(CheckpointError::DuplicateName(t.name.clone()));
            }
        }
        Ok(())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bitwise_eq(&self, other: &TensorMap) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.len() == b.data.len()
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl FromIterator<Tensor> for TensorMap {
    fn from_iter<I: IntoIterator<Item = Tensor>>(iter: I) -> Self {
        let mut map = TensorMap::new();
        for t in iter {
            map.insert(t);
        }
        map
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
    byte_len: u64,
}

/// Serializes a validated map to the `EMCP` byte layout.
pub fn encode(model: &TensorMap) -> Result<Vec<u8>, CheckpointError> {
    model.validate()?;
    let mut offset = 0u64;
    let manifest: Vec<ManifestEntry> = model
        .iter()
        .map(|t| {
            let byte_len = (t.data.len() * 4) as u64;
            let entry = ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".to_string(),
                byte_offset: offset,
                byte_len,
            };
            offset += byte_len;
            entry
        })
        .collect();
    let manifest = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in model.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates an `EMCP` byte buffer.
pub fn decode(bytes: &[u8]) -> Result<TensorMap, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("missing header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated("incomplete header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let manifest_end = (HEADER_LEN as u64)
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| {
            CheckpointError::Truncated(format!(
                "manifest of {manifest_len} bytes exceeds file length {}",
                bytes.len()
            ))
        })? as usize;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let payload = &bytes[manifest_end..];
    let payload_len = payload.len() as u64;

    let mut model = TensorMap::new();
    let mut seen = HashSet::with_capacity(manifest.len());
    for entry in manifest {
        if entry.dtype != "f32" {
            return Err(CheckpointError::UnsupportedDtype {
                name: entry.name,
                dtype: entry.dtype,
            });
        }
        let end = entry.byte_offset.checked_add(entry.byte_len);
        let range = match end {
            Some(end) if end <= payload_len => entry.byte_offset as usize..end as usize,
            _ => {
                return Err(CheckpointError::OutOfBounds {
                    name: entry.name,
                    offset: entry.byte_offset,
                    end: end.unwrap_or(u64::MAX),
                    payload_len,
                })
            }
        };
        if entry.byte_len % 4 != 0 {
            return Err(CheckpointError::Manifest(format!(
                "tensor {:?}: byte_len {} is not a multiple of 4",
                entry.name, entry.byte_len
            )));
        }
        let data: Vec<f32> = payload[range]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(entry.name, entry.shape, data);
        tensor.validate()?;
        if !seen.insert(tensor.name.clone()) {
            return Err(CheckpointError::DuplicateName(tensor.name));
        }
        model.entries.push(tensor);
    }
    Ok(model)
}

/// Writes `model` to `path`. Nothing is written if the map is invalid.
pub fn save_checkpoint(model: &TensorMap, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
