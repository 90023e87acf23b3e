//! Binary model checkpoints.
//!
//! Layout: magic `FDRMCKPT`, `u32` version, `u64` header length, JSON
//! [`ModelConfig`] header, `u64` parameter count, then the flattened
//! parameters as little-endian `f64`. All integers little-endian.

use std::fs;
use std::path::Path;

use super::{GlobalModel, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FDRMCKPT";
const VERSION: u32 = 1;

pub fn to_bytes(model: &GlobalModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&model.config)?;
    let flat = model.flatten();
    let mut out = Vec::with_capacity(28 + header.len() + 8 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Validation("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<GlobalModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Validation("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Validation(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(header_len)?)?;
    let count = r.u64()? as usize;
    let bytes = r.take(count.checked_mul(8).ok_or_else(|| Error::Validation("bad count".into()))?)?;
    if r.pos != buf.len() {
        return Err(Error::Validation("trailing bytes after checkpoint".into()));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    GlobalModel::from_flat(&config, &flat)
}

pub fn save(model: &GlobalModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<GlobalModel> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
