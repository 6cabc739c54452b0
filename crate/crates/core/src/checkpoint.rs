//! Binary checkpoint archives.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `BGNETCK\0` |
//! | 4 | format version (`u32`, currently 1) |
//! | 8 | header length `n` (`u64`) |
//! | n | UTF-8 JSON header |
//! | rest | tensor payload, `f64` values |
//!
//! The header holds the epoch counter, the training configuration (both
//! optional) and one record per tensor with its name, shape, kind and element
//! offset into the payload. Tensors are stored back to back in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{BgError, Result};
use crate::params::{ParamKind, ParamStore};

pub const MAGIC: &[u8; 8] = b"BGNETCK\0";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    Weight,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    kind: KindTag,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    epoch: Option<usize>,
    config: Option<TrainConfig>,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone)]
pub struct Archive {
    /// Number of completed epochs.
    pub epoch: Option<usize>,
    pub config: Option<TrainConfig>,
    pub store: ParamStore,
}

pub fn encode(archive: &Archive) -> Vec<u8> {
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(archive.store.len());
    for (_, e) in archive.store.entries() {
        assert!(!e.value.is_meta(), "cannot serialize a shape-only store");
        let kind = match e.kind {
            ParamKind::Weight => KindTag::Weight,
            ParamKind::Buffer => KindTag::Buffer,
        };
        tensors.push(TensorRecord { name: e.name.clone(), shape: e.value.shape().to_vec(), kind, offset });
        offset += e.value.numel();
    }
    let header = Header { epoch: archive.epoch, config: archive.config.clone(), tensors };
    let json = serde_json::to_vec(&header).expect("checkpoint header is serializable");
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, e) in archive.store.entries() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_err(msg: impl Into<String>) -> BgError {
    BgError::Decode(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<Archive> {
    if bytes.len() < PREFIX_LEN {
        return Err(decode_err(format!("{} bytes is shorter than the fixed prefix", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(decode_err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(decode_err(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let rest = &bytes[PREFIX_LEN..];
    if header_len > MAX_HEADER || header_len > rest.len() as u64 {
        return Err(decode_err(format!("header length {header_len} exceeds the archive")));
    }
    let (json, payload) = rest.split_at(header_len as usize);
    let header: Header = serde_json::from_slice(json).map_err(|e| decode_err(format!("header: {e}")))?;
    if payload.len() % 8 != 0 {
        return Err(decode_err("payload is not a whole number of f64 values"));
    }
    let total = payload.len() / 8;
    let mut store = ParamStore::new();
    let mut expected = 0usize;
    for rec in header.tensors {
        if rec.offset != expected {
            return Err(decode_err(format!("tensor {} starts at {} instead of {expected}", rec.name, rec.offset)));
        }
        let numel = rec
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| decode_err(format!("tensor {} has an overflowing shape", rec.name)))?;
        let end = expected.checked_add(numel).filter(|&e| e <= total).ok_or_else(|| {
            decode_err(format!("tensor {} extends past the payload", rec.name))
        })?;
        if store.id(&rec.name).is_some() {
            return Err(decode_err(format!("duplicate tensor {}", rec.name)));
        }
        let data: Vec<f64> =
            payload[expected * 8..end * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let kind = match rec.kind {
            KindTag::Weight => ParamKind::Weight,
            KindTag::Buffer => ParamKind::Buffer,
        };
        store.add(&rec.name, bgnet_tensor::Tensor::new(rec.shape, data), kind);
        expected = end;
    }
    if expected != total {
        return Err(decode_err(format!("{} trailing payload values", total - expected)));
    }
    Ok(Archive { epoch: header.epoch, config: header.config, store })
}

pub fn save(path: &Path, archive: &Archive) -> Result<()> {
    std::fs::write(path, encode(archive))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| BgError::Load { path: path.to_path_buf(), message: e.to_string() })?;
    decode(&bytes).map_err(|e| BgError::Load { path: path.to_path_buf(), message: e.to_string() })
}

/// Tensors of an archive, ignoring its metadata.
pub fn read_tensor_file(path: &Path) -> Result<ParamStore> {
    Ok(load(path)?.store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bgnet_tensor::Tensor;

    fn sample() -> Archive {
        let mut store = ParamStore::new();
        store.add("a.weight", Tensor::new([2, 2], vec![1.0, -2.5, f64::MIN_POSITIVE, 3e300]), ParamKind::Weight);
        store.add("a.running_var", Tensor::new([2], vec![0.5, 0.25]), ParamKind::Buffer);
        store.add("empty", Tensor::new([0], vec![]), ParamKind::Weight);
        Archive { epoch: Some(3), config: Some(TrainConfig::default()), store }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let a = sample();
        let bytes = encode(&a);
        let b = decode(&bytes).unwrap();
        assert_eq!(b.epoch, Some(3));
        assert_eq!(b.config, a.config);
        assert_eq!(b.store.len(), 3);
        for ((_, x), (_, y)) in a.store.entries().zip(b.store.entries()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.kind, y.kind);
            assert_eq!(x.value, y.value);
        }
        assert_eq!(encode(&b), bytes);
    }

    #[test]
    fn rejects_truncation_and_corruption() {
        let bytes = encode(&sample());
        for cut in [0, 7, 19, 40, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.extend_from_slice(&[0; 8]);
        assert!(decode(&long).is_err());
    }
}
