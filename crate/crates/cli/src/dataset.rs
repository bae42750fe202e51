//! `ACLD` dataset files: the magic `ACLD`, `u32` version, `u32` sample count,
//! `u32` C, H and W, one `u8` label per sample, then the pixels as `f32`
//! (sample-major, then channel, row, column). Integers are little-endian.

use std::io::{Read, Write};

use acl_core::data::LabeledSet;
use acl_core::ClassId;

use crate::aclt::Cursor;
use crate::error::FormatError;

pub const MAGIC: [u8; 4] = *b"ACLD";
pub const VERSION: u32 = 1;

pub fn write_dataset<W: Write>(mut w: W, set: &LabeledSet) -> Result<(), FormatError> {
    let [c, h, wd] = set.image_shape();
    let count = u32::try_from(set.len()).map_err(|_| FormatError::Invalid {
        offset: 0,
        reason: format!("{} samples do not fit the header", set.len()),
    })?;
    let mut buf = Vec::with_capacity(24 + set.len() * (1 + 4 * c * h * wd));
    buf.extend_from_slice(&MAGIC);
    for v in [VERSION, count, c as u32, h as u32, wd as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &label in set.labels() {
        let byte = u8::try_from(label.0).map_err(|_| FormatError::Invalid {
            offset: buf.len() as u64,
            reason: format!("class id {} does not fit in a byte", label.0),
        })?;
        buf.push(byte);
    }
    for &v in set.pixels() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<LabeledSet, FormatError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor::new(&bytes);
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
    let n = cur.u32("sample count")? as usize;
    let shape = [cur.u32("channels")? as usize, cur.u32("height")? as usize, cur.u32("width")? as usize];
    if shape.contains(&0) {
        return Err(FormatError::Invalid {
            offset: 8,
            reason: format!("degenerate image shape {shape:?}"),
        });
    }
    let labels: Vec<ClassId> = cur.take(n, "labels")?.iter().map(|&b| ClassId(b.into())).collect();
    let pixel_bytes = shape
        .iter()
        .try_fold(n, |acc, &d| acc.checked_mul(d))
        .and_then(|p| p.checked_mul(4))
        .ok_or_else(|| FormatError::Invalid {
            offset: 8,
            reason: "pixel payload size overflows".into(),
        })?;
    let pixels = cur
        .take(pixel_bytes, "pixels")?
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    if !cur.at_end() {
        return Err(FormatError::Invalid {
            offset: cur.offset(),
            reason: "trailing bytes after pixel payload".into(),
        });
    }
    Ok(LabeledSet::new(shape, pixels, labels)?)
}
