//! Parameter checkpoints.
//!
//! Layout: `FPFORGE1` magic, a UTF-8 JSON header, a single `\0`, then the
//! tensors as concatenated little-endian `f32` blobs. Header offsets are byte
//! offsets into the blob section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FPFORGE1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

pub fn encode(params: &ParamSet<f32>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(params.numel() * 4);
    for p in params.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            dtype: "f32".into(),
            offset: blob.len() as u64,
        });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { params: entries, meta })?;
    let mut out = Vec::with_capacity(MAGIC.len() + header.len() + 1 + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header);
    out.push(0);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParamSet<f32>, serde_json::Value)> {
    let bad = |message: String| Error::Format {
        what: "checkpoint",
        message,
    };
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| bad("missing FPFORGE1 magic".into()))?;
    let nul = rest
        .iter()
        .position(|&b| b == 0)
        .ok_or_else(|| bad("missing header terminator".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..nul]).map_err(|e| bad(format!("header: {e}")))?;
    let blob = &rest[nul + 1..];
    let mut params = ParamSet::new();
    for e in header.params {
        if e.dtype != "f32" {
            return Err(bad(format!("`{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        let raw = blob
            .get(start..end)
            .ok_or_else(|| bad(format!("`{}` spans {start}..{end} past blob end {}", e.name, blob.len())))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(e.name, Tensor::new(e.shape, data)?);
    }
    Ok((params, header.meta))
}

pub fn save(path: &Path, params: &ParamSet<f32>, meta: serde_json::Value) -> Result<()> {
    let bytes = encode(params, meta)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamSet<f32>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(values in proptest::collection::vec(-1e3f32..1e3, 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut p = ParamSet::new();
            p.push("a", Tensor::new(vec![split], values[..split].to_vec()).unwrap());
            p.push("b.weight", Tensor::new(vec![1, values.len() - split], values[split..].to_vec()).unwrap());
            let bytes = encode(&p, serde_json::json!({"k": 1})).unwrap();
            let (back, meta) = decode(&bytes).unwrap();
            prop_assert_eq!(back, p);
            prop_assert_eq!(meta, serde_json::json!({"k": 1}));
        }
    }

    #[test]
    fn layout() {
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap());
        let bytes = encode(&p, serde_json::Value::Null).unwrap();
        assert!(bytes.starts_with(b"FPFORGE1{"));
        let nul = bytes.iter().position(|&b| b == 0).unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..nul]).unwrap();
        assert_eq!(header["params"][0]["offset"], 0);
        assert_eq!(header["params"][0]["dtype"], "f32");
        assert_eq!(&bytes[nul + 1..], &[0, 0, 128, 63, 0, 0, 0, 192]);
    }

    #[test]
    fn rejects_corruption() {
        assert!(decode(b"NOTMAGIC{}\0").is_err());
        let mut p = ParamSet::new();
        p.push("w", Tensor::new(vec![2], vec![1.0f32, -2.0]).unwrap());
        let bytes = encode(&p, serde_json::Value::Null).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
