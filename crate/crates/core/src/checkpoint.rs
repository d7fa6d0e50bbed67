//! Binary parameter checkpoints.
//!
//! ```text
//! magic    8 bytes  "HOICKPT1"
//! version  u32 LE
//! count    u32 LE
//! per parameter, in name order:
//!   name_len u32 LE, name (UTF-8), rows u32 LE, cols u32 LE,
//!   rows*cols f64 LE, row-major
//! ```
//!
//! Values are stored as raw `f64`, so a load returns bit-identical weights.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor2};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HOICKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint(format!("parameter {i} has a non-UTF-8 name")))?
            .to_string();
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` has an impossible shape {rows}x{cols}")))?;
        let data = r
            .take(n, &name)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store
            .insert(name.clone(), Tensor2::new(rows, cols, data)?)
            .map_err(|_| Error::Checkpoint(format!("duplicate parameter `{name}`")))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Checks that `loaded` has exactly the names and shapes of `expected`.
pub fn check_compatible(expected: &ParamStore, loaded: &ParamStore) -> Result<()> {
    for (name, p) in expected.iter() {
        match loaded.get(name) {
            None => return Err(Error::Checkpoint(format!("checkpoint lacks parameter `{name}`"))),
            Some(v) if v.shape() != p.value.shape() => {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` is {:?} in the checkpoint but the model expects {:?}",
                    v.shape(),
                    p.value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = loaded.names().find(|n| !expected.contains(n)) {
        return Err(Error::Checkpoint(format!("checkpoint has unexpected parameter `{extra}`")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor2::from_rows(&[&[1.0, -0.0], &[f64::MIN_POSITIVE, 1e300]])).unwrap();
        s.insert("b", Tensor2::from_rows(&[&[0.1 + 0.2]])).unwrap();
        s
    }

    fn bits(s: &ParamStore) -> Vec<(String, Vec<u64>)> {
        s.iter()
            .map(|(n, p)| (n.to_string(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let back = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
        assert_eq!(bits(&back), bits(&s));
        check_compatible(&s, &back).unwrap();
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = encode_checkpoint(&sample());
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_and_name_mismatch() {
        let s = sample();
        let mut other = ParamStore::new();
        other.insert("a.w", Tensor2::zeros(2, 3)).unwrap();
        other.insert("b", Tensor2::zeros(1, 1)).unwrap();
        assert!(matches!(check_compatible(&s, &other), Err(Error::Checkpoint(_))));
        let mut missing = ParamStore::new();
        missing.insert("a.w", Tensor2::zeros(2, 2)).unwrap();
        assert!(check_compatible(&s, &missing).is_err());
        assert!(check_compatible(&missing, &s).is_err());
    }
}
