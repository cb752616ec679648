//! CWB weight bundles: `"CWB1"`, a little-endian `u32` header length `L`,
//! `L` bytes of UTF-8 JSON describing each entry, then raw little-endian
//! `f32` blobs (row-major, no padding) addressed relative to the end of the
//! header.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"CWB1";

#[derive(Debug, Error)]
pub enum CwbError {
    #[error("bad magic: expected \"CWB1\"")]
    BadMagic,
    #[error("truncated bundle: {0}")]
    Truncated(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("missing entry {0:?}")]
    Missing(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite values in {0:?}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwbEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

pub fn encode_cwb(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut header = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, t) in entries {
        let nbytes = (t.len() * 4) as u64;
        header.push(CwbEntry {
            name: name.to_string(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_cwb(mut w: impl Write, entries: &[(&str, &Tensor)]) -> std::io::Result<()> {
    w.write_all(&encode_cwb(entries))
}

/// Parses a bundle into named tensors in header order.
pub fn decode_cwb(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CwbError> {
    if bytes.len() < 4 {
        return Err(CwbError::Truncated("missing magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(CwbError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(CwbError::Truncated("missing header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body_start = 8usize
        .checked_add(hlen)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            CwbError::Truncated(format!(
                "header length {hlen} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let header: Vec<CwbEntry> = serde_json::from_slice(&bytes[8..body_start])
        .map_err(|e| CwbError::Header(e.to_string()))?;
    let body = &bytes[body_start..];
    let mut out = Vec::with_capacity(header.len());
    for e in header {
        if e.dtype != "f32" {
            return Err(CwbError::Header(format!(
                "{}: unsupported dtype {:?}",
                e.name, e.dtype
            )));
        }
        let count: usize = e.shape.iter().product();
        if e.shape.is_empty() || count == 0 || e.nbytes != (count * 4) as u64 {
            return Err(CwbError::Header(format!(
                "{}: nbytes {} inconsistent with shape {:?}",
                e.name, e.nbytes, e.shape
            )));
        }
        let start = e.offset as usize;
        let end = start
            .checked_add(e.nbytes as usize)
            .filter(|&end| end <= body.len())
            .ok_or_else(|| {
                CwbError::Truncated(format!(
                    "{}: blob [{start}, {}) beyond data section of {} bytes",
                    e.name,
                    start + e.nbytes as usize,
                    body.len()
                ))
            })?;
        let data: Vec<f32> = body[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CwbError::NonFinite(e.name));
        }
        out.push((e.name, Tensor::from_parts(e.shape, data)));
    }
    Ok(out)
}
