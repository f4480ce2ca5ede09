//! Tensor archives: a structured-text table of `(name, shape, offset)` entries
//! plus one flat little-endian `f64` blob.
//!
//! Checkpoints and datasets both embed [`TensorEntry`] tables in their JSON
//! manifests and keep the numbers in `.bin` blobs, so round trips are
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

impl TensorEntry {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 8
    }
}

/// Packs tensors back to back; returns the table and the blob bytes.
pub fn pack<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (entries, blob)
}

pub fn unpack(entries: &[TensorEntry], blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let expected: usize = entries.iter().map(TensorEntry::byte_len).sum();
    if blob.len() != expected {
        return Err(Error::format(
            "blob",
            format!("size mismatch: {} bytes on disk, table describes {expected}", blob.len()),
        ));
    }
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let end = e.offset + e.byte_len();
        if end > blob.len() {
            return Err(Error::format(
                format!("{}.offset", e.name),
                format!("range {}..{end} exceeds blob of {} bytes", e.offset, blob.len()),
            ));
        }
        let data: Vec<f64> = blob[e.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&e.shape, data)
            .map_err(|_| Error::format(format!("{}.shape", e.name), "empty or zero extent"))?;
        out.push((e.name.clone(), t));
    }
    Ok(out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}
