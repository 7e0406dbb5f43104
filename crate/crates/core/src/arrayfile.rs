//! Little-endian binary container for named arrays.
//!
//! ```text
//! magic   8 bytes  "MIXLOC1\0"
//! count   u32      number of arrays
//! then, per array:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   rank     u32, dims (u64 × rank)
//!   values   f64 × product(dims), row-major
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MIXLOC1\0";

pub fn encode(arrays: &[(String, Array)]) -> Vec<u8> {
    let payload: usize = arrays.iter().map(|(n, a)| 12 + n.len() + 8 * (a.shape().len() + a.len())).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, a) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
        for &d in a.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_inner(bytes: &[u8]) -> std::result::Result<Vec<(String, Array)>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format!("array name is not UTF-8: {e}"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or("array size overflows")?;
        let raw = r.take(n.checked_mul(8).ok_or("array size overflows")?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Array::new(shape, data).map_err(|e| e.to_string())?));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Array)>> {
    decode_inner(bytes).map_err(|msg| Error::format("<memory>", msg))
}

pub fn write(path: &Path, arrays: &[(String, Array)]) -> Result<()> {
    fs::write(path, encode(arrays)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<(String, Array)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_inner(&bytes).map_err(|msg| Error::format(path, msg))
}

/// Looks up an array by name.
pub fn find<'a>(arrays: &'a [(String, Array)], name: &str) -> Option<&'a Array> {
    arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
}
