//! Binary weight files: magic `SSTD`, `u32` format version, `u32` tensor
//! count, then per tensor a `u32` name length, UTF-8 name, four `u32` dims
//! and the values as little-endian `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SSTD";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_weights(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.element_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = t.shape();
        for d in [s.n, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
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
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a whole file; any defect yields an error and no partial model.
pub fn decode_weights(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected SSTD".into(),
        });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?).map_err(|_| Error::Format {
            offset: at + 4,
            msg: "tensor name is not UTF-8".into(),
        })?;
        let dims_at = r.pos as u64;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("tensor dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Format {
                offset: dims_at,
                msg: format!("invalid dims {dims:?} for `{name}`"),
            })?;
        let raw = r.take(n.saturating_mul(4), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.get(name).is_ok() {
            return Err(Error::Format {
                offset: at,
                msg: format!("duplicate tensor `{name}`"),
            });
        }
        params.insert(name.to_string(), Tensor::from_vec(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(params)
}

pub fn save_weights(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(params))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    decode_weights(&fs::read(path)?)
}
