//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AFCL0001"
//! repeated until end of file:
//!     u32  name length in bytes
//!     [u8] UTF-8 name
//!     u32  rank
//!     u64  dimension, `rank` times
//!     f64  values, row-major, product(dims) times
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AFCL0001";

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub fn write_to<W: Write>(mut out: W, entries: &[(String, Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, t) in entries {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_from<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(malformed("bad magic"));
    }
    let mut pos = MAGIC.len();
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| malformed("truncated"))?;
        let s = &buf[pos..end];
        pos = end;
        Ok(s)
    };
    let mut entries = Vec::new();
    while let Ok(len) = take(4) {
        let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
        let name = std::str::from_utf8(take(len)?)
            .map_err(|e| malformed(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel.checked_mul(8).ok_or_else(|| malformed("size overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| malformed(format!("{name}: {e}")))?;
        entries.push((name, tensor));
    }
    if pos != buf.len() {
        return Err(malformed("trailing bytes"));
    }
    Ok(entries)
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_to(std::io::BufWriter::new(file), entries)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_from(std::io::BufReader::new(std::fs::File::open(path)?))
}
