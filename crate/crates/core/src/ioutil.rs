//! Small helpers shared by the binary file formats.
//!
//! Every binary format in this crate is little-endian and starts with a
//! 4-byte ASCII magic.

use std::io::{self, Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("malformed {what}: {detail}")]
    Malformed {
        what: &'static str,
        detail: String,
    },
}

impl FormatError {
    pub fn malformed(what: &'static str, detail: impl Into<String>) -> Self {
        FormatError::Malformed {
            what,
            detail: detail.into(),
        }
    }
}

pub fn write_magic(w: &mut impl Write, magic: &'static str) -> io::Result<()> {
    debug_assert_eq!(magic.len(), 4);
    w.write_all(magic.as_bytes())
}

pub fn read_magic(r: &mut impl Read, magic: &'static str) -> Result<(), FormatError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    if buf != magic.as_bytes() {
        return Err(FormatError::BadMagic { expected: magic });
    }
    Ok(())
}

pub fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32, FormatError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_f32_slice(w: &mut impl Write, values: &[f32]) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32_vec(r: &mut impl Read, count: usize) -> Result<Vec<f32>, FormatError> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Dimensions read from untrusted headers; guards against overflow and
/// absurd allocations.
pub fn checked_dims(height: u32, width: u32) -> Result<(usize, usize), FormatError> {
    let (h, w) = (height as usize, width as usize);
    let cells = h
        .checked_mul(w)
        .ok_or_else(|| FormatError::malformed("header", "dimension overflow"))?;
    if cells == 0 || cells > (1 << 28) {
        return Err(FormatError::malformed(
            "header",
            format!("unreasonable dimensions {w}x{h}"),
        ));
    }
    Ok((h, w))
}
