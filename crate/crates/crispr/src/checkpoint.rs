//! Binary tensor container and the model checkpoint built on it.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic bytes  b"CRSP"
//! offset 4   u32          format version (currently 1)
//! offset 8   u64          metadata length M in bytes
//! offset 16  [u8; M]      metadata: UTF-8 JSON (see below)
//! offset 16+M             tensor payloads, raw row-major values, packed
//!                         back-to-back in sorted tensor-name order
//! ```
//!
//! Metadata JSON:
//!
//! ```json
//! {
//!   "config": { ...model config, present for model checkpoints... },
//!   "extra":  { ...free-form entries, e.g. attribution dump labels... },
//!   "tensors": { "name": {"shape": [rows, cols], "dtype": "f64", "offset": 0} }
//! }
//! ```
//!
//! `offset` is relative to the start of the payload region. Tensor values are
//! IEEE f32 or f64 little-endian per the entry dtype. Serialization is
//! canonical (sorted maps, fixed field order, no whitespace), so loading a
//! well-formed file and saving it again reproduces it byte for byte — which is
//! also what makes the sha256 of the serialization usable as a model
//! fingerprint.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Dtype, Model, ModelConfig};
use crate::tensor::Mat;

pub const MAGIC: [u8; 4] = *b"CRSP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    extra: BTreeMap<String, serde_json::Value>,
    tensors: BTreeMap<String, TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    shape: [u64; 2],
    dtype: Dtype,
    offset: u64,
}

/// A parsed container, before any model-level validation.
pub struct Container {
    pub config: Option<ModelConfig>,
    pub extra: BTreeMap<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Mat>,
    pub dtypes: BTreeMap<String, Dtype>,
}

// ── writing ───────────────────────────────────────────────────────────────

fn encode(
    config: Option<&ModelConfig>,
    extra: &BTreeMap<String, serde_json::Value>,
    tensors: &BTreeMap<String, Mat>,
    dtype: Dtype,
) -> Vec<u8> {
    let mut entries = BTreeMap::new();
    let mut offset = 0u64;
    for (name, mat) in tensors {
        entries.insert(
            name.clone(),
            TensorEntry {
                shape: [mat.rows as u64, mat.cols as u64],
                dtype,
                offset,
            },
        );
        offset += (mat.data.len() * dtype.byte_len()) as u64;
    }
    let metadata = Metadata {
        config: config.cloned(),
        extra: extra.clone(),
        tensors: entries,
    };
    let meta_bytes = serde_json::to_vec(&metadata).expect("metadata serialization cannot fail");

    let mut out = Vec::with_capacity(16 + meta_bytes.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    for mat in tensors.values() {
        match dtype {
            Dtype::F64 => {
                for &v in &mat.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::F32 => {
                for &v in &mat.data {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

/// Canonical serialization of a model checkpoint.
pub fn model_to_bytes(config: &ModelConfig, tensors: &BTreeMap<String, Mat>) -> Vec<u8> {
    encode(Some(config), &BTreeMap::new(), tensors, config.dtype)
}

/// sha256 hex of the canonical serialization — the model fingerprint.
pub fn fingerprint_parts(config: &ModelConfig, tensors: &BTreeMap<String, Mat>) -> String {
    let bytes = model_to_bytes(config, tensors);
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(model.config(), model.tensors());
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes a generic tensor container (no model config), e.g. attribution dumps.
pub fn save_tensors(
    path: &Path,
    extra: BTreeMap<String, serde_json::Value>,
    tensors: &BTreeMap<String, Mat>,
) -> Result<()> {
    let bytes = encode(None, &extra, tensors, Dtype::F64);
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

// ── reading ───────────────────────────────────────────────────────────────

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            context: format!("file is {} bytes, header needs 16", bytes.len()),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize.checked_add(meta_len).ok_or(Error::Truncated {
        context: "metadata length overflows".to_string(),
    })?;
    if bytes.len() < payload_start {
        return Err(Error::Truncated {
            context: format!(
                "metadata claims {meta_len} bytes but only {} remain",
                bytes.len() - 16
            ),
        });
    }
    let metadata: Metadata = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Metadata(e.to_string()))?;
    let payload = &bytes[payload_start..];

    let mut tensors = BTreeMap::new();
    let mut dtypes = BTreeMap::new();
    for (name, entry) in &metadata.tensors {
        let rows = entry.shape[0] as usize;
        let cols = entry.shape[1] as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::ShapeMismatch {
                name: name.clone(),
                detail: "shape overflows".to_string(),
            })?;
        let byte_len = count * entry.dtype.byte_len();
        let start = entry.offset as usize;
        let end = start.checked_add(byte_len).ok_or_else(|| Error::ShapeMismatch {
            name: name.clone(),
            detail: "offset overflows".to_string(),
        })?;
        if end > payload.len() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                detail: format!(
                    "payload needs bytes {start}..{end} but only {} are present",
                    payload.len()
                ),
            });
        }
        let slice = &payload[start..end];
        let mut data = Vec::with_capacity(count);
        match entry.dtype {
            Dtype::F64 => {
                for chunk in slice.chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
            Dtype::F32 => {
                for chunk in slice.chunks_exact(4) {
                    data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
                }
            }
        }
        tensors.insert(name.clone(), Mat::from_vec(rows, cols, data));
        dtypes.insert(name.clone(), entry.dtype);
    }

    Ok(Container {
        config: metadata.config,
        extra: metadata.extra,
        tensors,
        dtypes,
    })
}

pub fn load_model_bytes(bytes: &[u8]) -> Result<Model> {
    let container = decode(bytes)?;
    let config = container.config.ok_or(Error::MissingConfig)?;
    Model::from_parts(config, container.tensors)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    load_model_bytes(&bytes)
}

pub fn load_tensors(path: &Path) -> Result<Container> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}
