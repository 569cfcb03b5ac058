//! Reader and writer for the `.vita` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "VITA"
//! version    u32      1
//! count      u32      number of entries
//! entry * count:
//!   name_len u16
//!   name     name_len bytes, UTF-8
//!   dtype    u8       0 = f32
//!   rank     u8
//!   dims     u32 * rank
//!   payload  product(dims) values, little-endian
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VITA";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            values,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Load {
                entry: what.to_string(),
                reason: format!("truncated: need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = "header";
    if r.take(4, header)? != MAGIC {
        return Err(Error::Load {
            entry: header.into(),
            reason: "bad magic, expected \"VITA\"".into(),
        });
    }
    let version = r.u32(header)?;
    if version != VERSION {
        return Err(Error::Load {
            entry: header.into(),
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32(header)? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let placeholder = format!("entry #{i}");
        let name_len = r.u16(&placeholder)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &placeholder)?)
            .map_err(|e| Error::Load {
                entry: placeholder.clone(),
                reason: format!("name is not UTF-8: {e}"),
            })?
            .to_string();
        let dtype = r.u8(&name)?;
        if dtype != DTYPE_F32 {
            return Err(Error::Load {
                entry: name,
                reason: format!("unsupported dtype {dtype}"),
            });
        }
        let rank = r.u8(&name)? as usize;
        let dims = (0..rank)
            .map(|_| r.u32(&name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Load {
                entry: name.clone(),
                reason: format!("dims {dims:?} overflow"),
            })?;
        let payload = r.take(n, &name)?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push(Entry { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::Load {
            entry: "trailer".into(),
            reason: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(entries)
}

pub fn encode(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let bad = |reason: String| Error::Load {
            entry: e.name.clone(),
            reason,
        };
        let name_len = u16::try_from(e.name.len()).map_err(|_| bad("name too long".into()))?;
        let rank = u8::try_from(e.dims.len()).map_err(|_| bad("rank too large".into()))?;
        if e.dims.iter().product::<usize>() != e.values.len() {
            return Err(bad(format!(
                "dims {:?} do not match {} values",
                e.dims,
                e.values.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for &d in &e.dims {
            let d = u32::try_from(d).map_err(|_| bad(format!("dim {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode(entries)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
