//! `LGW1` binary cache of windowed datasets.
//!
//! Layout: magic, `u32` LE header length, JSON header, then little-endian
//! `f32` windows, `u32` labels and (optionally) `u32` subject ids.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::series::WindowedDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CACHE_MAGIC: &[u8; 4] = b"LGW1";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheHeader {
    pub version: u32,
    pub windows_shape: Vec<usize>,
    pub windows_dtype: String,
    pub labels_dtype: String,
    pub has_subjects: bool,
    pub window_len: usize,
    pub step: usize,
    pub class_names: Vec<String>,
    /// Digest of the manifest and source data the cache was built from.
    pub manifest_digest: String,
    /// SHA-256 of the payload that follows the header.
    pub payload_sha256: String,
}

fn payload(ds: &WindowedDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(ds.windows.len() * 4 + ds.len() * 8);
    for v in ds.windows.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    if let Some(s) = &ds.subjects {
        for &id in s {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    out
}

pub fn encode_cache(ds: &WindowedDataset, manifest_digest: &str) -> Vec<u8> {
    let body = payload(ds);
    let header = CacheHeader {
        version: CACHE_VERSION,
        windows_shape: ds.windows.shape().to_vec(),
        windows_dtype: "f32".into(),
        labels_dtype: "u32".into(),
        has_subjects: ds.subjects.is_some(),
        window_len: ds.window_len,
        step: ds.step,
        class_names: ds.class_names.clone(),
        manifest_digest: manifest_digest.to_string(),
        payload_sha256: hex::encode(Sha256::digest(&body)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + body.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&body);
    out
}

pub fn write_cache(path: &Path, ds: &WindowedDataset, manifest_digest: &str) -> Result<()> {
    let bytes = encode_cache(ds, manifest_digest);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Decodes a cache; with `expected_digest`, a cache built from a different
/// manifest is refused.
pub fn decode_cache(bytes: &[u8], expected_digest: Option<&str>) -> Result<WindowedDataset> {
    if bytes.len() < 8 || &bytes[..4] != CACHE_MAGIC {
        return Err(Error::Cache("not an LGW1 cache file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body_start = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Cache("truncated header".into()))?;
    let header: CacheHeader =
        serde_json::from_slice(&bytes[8..body_start]).map_err(|e| Error::Cache(format!("bad header: {e}")))?;
    if header.version != CACHE_VERSION {
        return Err(Error::Cache(format!(
            "unsupported cache version {} (expected {CACHE_VERSION})",
            header.version
        )));
    }
    if let Some(expected) = expected_digest {
        if expected != header.manifest_digest {
            return Err(Error::Cache(format!(
                "manifest digest mismatch: cache built from {}, manifest is {expected}",
                header.manifest_digest
            )));
        }
    }
    if header.windows_dtype != "f32" || header.labels_dtype != "u32" {
        return Err(Error::Cache("unsupported dtypes".into()));
    }
    let shape = &header.windows_shape;
    if shape.len() != 4 || shape[1] != 1 || shape[2] != header.window_len {
        return Err(Error::Cache(format!("bad windows shape {shape:?}")));
    }
    let n = shape[0];
    let values: usize = shape.iter().product();
    let expected_len = values * 4 + n * 4 + if header.has_subjects { n * 4 } else { 0 };
    let body = &bytes[body_start..];
    if body.len() != expected_len {
        return Err(Error::Cache(format!(
            "payload is {} bytes, header implies {expected_len}",
            body.len()
        )));
    }
    if hex::encode(Sha256::digest(body)) != header.payload_sha256 {
        return Err(Error::Cache("payload checksum mismatch".into()));
    }
    let mut words = body
        .chunks_exact(4)
        .map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"));
    let data: Vec<f32> = words.by_ref().take(values).map(f32::from_le_bytes).collect();
    let labels: Vec<usize> = words.by_ref().take(n).map(|w| u32::from_le_bytes(w) as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= header.class_names.len()) {
        return Err(Error::Cache(format!("label {bad} out of range")));
    }
    let subjects = header
        .has_subjects
        .then(|| words.take(n).map(u32::from_le_bytes).collect());
    Ok(WindowedDataset {
        windows: Tensor::from_vec(shape, data)?,
        labels,
        window_len: header.window_len,
        step: header.step,
        class_names: header.class_names,
        subjects,
    })
}

pub fn read_cache(path: &Path, expected_digest: Option<&str>) -> Result<WindowedDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes, expected_digest)
}
