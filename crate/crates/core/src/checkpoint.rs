//! Binary parameter container shared by model and actor checkpoints.
//!
//! Layout: the 8-byte magic `TGDCKPT\0`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then every tensor as little-endian `f64` values in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const MAGIC: &[u8; 8] = b"TGDCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    /// Component-specific metadata (model dims, actor kind, vocabulary hashes).
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn bad(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn encode(kind: &str, meta: serde_json::Value, params: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        params: params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

pub fn write(path: &Path, kind: &str, meta: serde_json::Value, params: &[(String, &Tensor)]) -> Result<()> {
    let bytes = encode(kind, meta, params)?;
    fs::write(path, bytes).map_err(Error::io(path))
}

/// Reads a container and checks that it holds a `kind` checkpoint.
pub fn read(path: &Path, kind: &str) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    if header.kind != kind {
        return Err(bad(
            path,
            format!("expected a {kind} checkpoint, found {}", header.kind),
        ));
    }
    let mut offset = 16 + hlen;
    let mut tensors = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(path, format!("truncated data for {}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad(path, "trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}
