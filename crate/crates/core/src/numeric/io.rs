//! Binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"HMBA" | u32 version (= 1) | u32 ndim | ndim x u64 extent | f64 payload, row-major
//! ```

use std::fs;
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HMBA";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.shape().len() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            Error::Corrupt(format!(
                "truncated while reading {what} at byte {} of {}",
                self.pos,
                self.buf.len()
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let ndim = r.u32("ndim")? as usize;
    if ndim == 0 || ndim > 16 {
        return Err(Error::Corrupt(format!("implausible rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for _ in 0..ndim {
        let e = r.u64("extent")?;
        let e = usize::try_from(e)
            .ok()
            .filter(|&e| e > 0)
            .ok_or_else(|| Error::Corrupt(format!("bad extent {e}")))?;
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::Corrupt("extent product overflows".into()))?;
        shape.push(e);
    }
    let payload = r.take(
        numel
            .checked_mul(8)
            .ok_or_else(|| Error::Corrupt("payload size overflows".into()))?,
        "payload",
    )?;
    if r.pos != buf.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
