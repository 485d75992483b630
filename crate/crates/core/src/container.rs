//! Flat container of named arrays, used for checkpoints and fixtures.
//!
//! ```text
//! magic        8 bytes  "LAWGARR1"
//! count        u64 LE
//! per entry:
//!   name_len   u32 LE, then name_len bytes of UTF-8
//!   dtype      u8        1 = f64, 2 = u64
//!   rank       u32 LE
//!   dims       rank × u64 LE
//!   payload    product(dims) × 8 bytes LE
//! ```
//!
//! Entries are written in the order given; decoding preserves that order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LAWGARR1";
const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    U64 = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Entry {
    pub fn tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Entry {
            name: name.into(),
            dims: t.shape().to_vec(),
            data: ArrayData::F64(t.data().to_vec()),
        }
    }

    pub fn words(name: impl Into<String>, words: Vec<u64>) -> Self {
        Entry {
            name: name.into(),
            dims: vec![words.len()],
            data: ArrayData::U64(words),
        }
    }

    /// Text stored one byte per `u64` word.
    pub fn text(name: impl Into<String>, text: &str) -> Self {
        Self::words(name, text.bytes().map(u64::from).collect())
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            ArrayData::F64(_) => DType::F64,
            ArrayData::U64(_) => DType::U64,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.data {
            ArrayData::F64(v) => Tensor::new(&self.dims, v.clone()),
            ArrayData::U64(_) => Err(self.type_error("f64")),
        }
    }

    pub fn as_words(&self) -> Result<&[u64]> {
        match &self.data {
            ArrayData::U64(v) => Ok(v),
            ArrayData::F64(_) => Err(self.type_error("u64")),
        }
    }

    pub fn as_text(&self) -> Result<String> {
        let bytes = self
            .as_words()?
            .iter()
            .map(|&w| u8::try_from(w))
            .collect::<std::result::Result<Vec<u8>, _>>()
            .map_err(|_| self.type_error("byte text"))?;
        String::from_utf8(bytes).map_err(|_| self.type_error("UTF-8 text"))
    }

    fn type_error(&self, want: &str) -> Error {
        Error::Format {
            context: format!("entry {}", self.name),
            detail: format!("expected {want}"),
        }
    }
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.dtype() as u8);
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &e.data {
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format {
                context: format!("byte {}", self.pos),
                detail: format!("truncated while reading {what}"),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            context: format!("byte {}", self.pos),
            detail: detail.into(),
        }
    }
}

/// Decodes a container. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            context: "header".into(),
            detail: "bad magic".into(),
        });
    }
    let count = r.u64("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.err("entry name is not UTF-8"))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        let rank = r.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(r.err(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dimension")?).map_err(|_| r.err("dimension overflows"))?;
            if d == 0 {
                return Err(r.err("zero-sized dimension"));
            }
            numel = numel.checked_mul(d).ok_or_else(|| r.err("element count overflows"))?;
            dims.push(d);
        }
        let nbytes = numel.checked_mul(8).ok_or_else(|| r.err("payload size overflows"))?;
        let payload = r.take(nbytes, "payload")?;
        let words = payload
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")));
        let data = match dtype {
            1 => ArrayData::F64(words.map(f64::from_bits).collect()),
            2 => ArrayData::U64(words.collect()),
            other => return Err(r.err(format!("unknown dtype tag {other}"))),
        };
        entries.push(Entry { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after last entry"));
    }
    Ok(entries)
}

pub fn write(path: &std::path::Path, entries: &[Entry]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &std::path::Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { context, detail } => Error::Format {
            context: format!("{}: {context}", path.display()),
            detail,
        },
        other => other,
    })
}
