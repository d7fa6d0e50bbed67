//! Flat binary visual-feature files.
//!
//! Layout, all little-endian: the magic bytes `HOIF`, a `u32` format
//! version, `u32` frame count, `u32` feature dimension, then
//! `frames * dim` `f32` values in frame-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

pub const FEATURE_MAGIC: &[u8; 4] = b"HOIF";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(features: &Tensor2) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], source: &str) -> Result<Tensor2> {
    let header = |msg: &str| Error::schema(source, msg.to_string());
    if bytes.len() < 16 {
        return Err(header("file is shorter than the feature header"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(header("bad magic bytes"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(header(&format!("unsupported feature format version {version}")));
    }
    let (frames, dim) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[16..];
    if payload.len() != frames * dim * 4 {
        return Err(Error::Length {
            path: source.to_string(),
            expected: frames * dim * 4,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Tensor2::new(frames, dim, data)
}

pub fn save_features(path: &Path, features: &Tensor2) -> Result<()> {
    std::fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Tensor2> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}
