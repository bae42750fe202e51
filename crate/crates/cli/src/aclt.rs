//! `ACLT` named-tensor files.
//!
//! Layout, all integers little-endian: the magic `ACLT`, a `u32` version, then
//! records until end of file. A record is a `u32` name length, the UTF-8 name, a
//! `u32` rank, `rank` dimensions as `u64`, and the values as `f64`.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use acl_core::Tensor;

use crate::error::FormatError;

pub const MAGIC: [u8; 4] = *b"ACLT";
pub const VERSION: u32 = 1;
pub const MAX_RANK: u32 = 8;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<(), FormatError> {
    let mut seen = BTreeSet::new();
    for (name, _) in tensors {
        if !seen.insert(*name) {
            return Err(FormatError::DuplicateName((*name).to_string()));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for (name, tensor) in tensors {
        let name_len = u32::try_from(name.len()).map_err(|_| FormatError::Invalid {
            offset: buf.len() as u64,
            reason: format!("name of {} bytes is too long", name.len()),
        })?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Parses a whole `ACLT` stream. Nothing is returned unless every record is valid.
pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_tensors(&bytes)
}

pub fn parse_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, FormatError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic.try_into().unwrap_or_default(),
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    while !cur.at_end() {
        let start = cur.offset();
        let name_len = cur.u32("name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| FormatError::Invalid {
                offset: start,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(FormatError::DuplicateName(name));
        }
        let rank = cur.u32("rank")?;
        if rank > MAX_RANK {
            return Err(FormatError::Invalid {
                offset: start,
                reason: format!("`{name}` has rank {rank}, above {MAX_RANK}"),
            });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(cur.u64("dimension")?);
        }
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .and_then(|b| usize::try_from(b).ok())
            .ok_or_else(|| FormatError::Invalid {
                offset: start,
                reason: format!("`{name}` has an overflowing shape {shape:?}"),
            })?;
        let payload = cur.take(numel, "tensor payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let shape: Vec<usize> = shape.into_iter().map(|d| d as usize).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.offset(),
                what,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
