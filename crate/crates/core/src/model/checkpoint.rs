//! Checkpoint container: one JSON header line, then little-endian `f32`
//! payloads in header order.
//!
//! The header carries free-form metadata and a table mapping each tensor name
//! to its shape, offset and length (both counted in `f32` elements from the
//! start of the payload).

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "protocomp-checkpoint-v1";

/// Header metadata and the named tensors, in file order.
pub type Decoded = (serde_json::Value, Vec<(String, Array2<f64>)>);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(meta: &serde_json::Value, tensors: &[(&str, &Array2<f64>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.to_string(), shape: [t.nrows(), t.ncols()], offset, length: t.len() });
        offset += t.len();
    }
    let header = Header { format: FORMAT.to_string(), meta: meta.clone(), tensors: entries };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset * 4);
    for (_, t) in tensors {
        for v in t.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    let payload = &bytes[nl + 1..];
    let mut expected_offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset != expected_offset || e.length != e.shape[0] * e.shape[1] {
            return Err(Error::Checkpoint(format!("inconsistent shape table entry for `{}`", e.name)));
        }
        let end = (e.offset + e.length) * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("payload truncated in `{}`", e.name)));
        }
        let values: Vec<f64> =
            payload[e.offset * 4..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), values).map_err(|err| Error::Checkpoint(err.to_string()))?;
        tensors.push((e.name.clone(), arr));
        expected_offset += e.length;
    }
    if expected_offset * 4 != payload.len() {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, shape table accounts for {}",
            payload.len(),
            expected_offset * 4
        )));
    }
    Ok((header.meta, tensors))
}

pub fn write(path: &Path, meta: &serde_json::Value, tensors: &[(&str, &Array2<f64>)]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_at_f32_precision() {
        let a = Array2::from_shape_fn((3, 4), |(i, j)| i as f64 * 0.5 - j as f64 / 3.0);
        let b = Array2::from_elem((1, 2), 1.0e-3);
        let bytes = encode(&json!({"seed": 7}), &[("a", &a), ("b", &b)]).unwrap();
        let (meta, tensors) = decode(&bytes).unwrap();
        assert_eq!(meta["seed"], 7);
        assert_eq!(tensors[0].0, "a");
        assert_eq!(tensors[0].1, a.mapv(|v| v as f32 as f64));
        assert_eq!(tensors[1].1, b.mapv(|v| v as f32 as f64));
    }

    #[test]
    fn payload_is_little_endian_f32() {
        let a = Array2::from_elem((1, 1), 1.5);
        let bytes = encode(&json!(null), &[("x", &a)]).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &1.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_rejected() {
        let a = Array2::zeros((4, 4));
        let bytes = encode(&json!({}), &[("a", &a)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(b"not a header").is_err());
    }
}
