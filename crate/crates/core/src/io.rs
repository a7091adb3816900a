//! FTNS feature files and FMSK mask files.
//!
//! Both formats are little-endian:
//!
//! ```text
//! FTNS: "FTNS" | u32 version=1 | u32 C | u32 H | u32 W | C·H·W × f32
//! FMSK: "FMSK" | u32 version=1 | u32 H | u32 W | H·W × u8 ∈ {0,1}
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, FeatureMap};

pub const FEATURE_MAGIC: [u8; 4] = *b"FTNS";
pub const MASK_MAGIC: [u8; 4] = *b"FMSK";
pub const FORMAT_VERSION: u32 = 1;

const FEATURE_HEADER: usize = 20;
const MASK_HEADER: usize = 16;

/// Serializes a feature map to FTNS bytes. Values are narrowed to f32; any
/// value that is not finite after narrowing is refused.
pub fn encode_feature(f: &FeatureMap) -> Result<Vec<u8>> {
    let (c, h, w) = f.shape();
    let mut out = Vec::with_capacity(FEATURE_HEADER + 4 * c * h * w);
    out.extend_from_slice(&FEATURE_MAGIC);
    for v in [FORMAT_VERSION, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (index, &v) in f.as_slice().iter().enumerate() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::NonFinite { index });
        }
        out.extend_from_slice(&narrowed.to_le_bytes());
    }
    Ok(out)
}

/// Parses FTNS bytes. Returns the map and the number of bytes consumed.
pub fn decode_feature(bytes: &[u8], path: &Path) -> Result<(FeatureMap, usize)> {
    check_magic(bytes, FEATURE_MAGIC, path)?;
    if bytes.len() < FEATURE_HEADER {
        return Err(Error::Truncated {
            path: path.into(),
            expected: FEATURE_HEADER,
            found: bytes.len(),
        });
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion {
            path: path.into(),
            version,
        });
    }
    let (c, h, w) = (
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
        read_u32(bytes, 16) as usize,
    );
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Shape(format!("{c}x{h}x{w} overflows")))?;
    let expected = FEATURE_HEADER + 4 * n;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[FEATURE_HEADER..expected]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((FeatureMap::new(c, h, w, data)?, expected))
}

pub fn write_feature_file(f: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_feature(f)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (f, used) = decode_feature(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::Shape(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(f)
}

pub fn encode_mask(m: &BinaryMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(MASK_HEADER + m.len());
    out.extend_from_slice(&MASK_MAGIC);
    for v in [FORMAT_VERSION, m.height() as u32, m.width() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(m.as_slice());
    out
}

pub fn decode_mask(bytes: &[u8], path: &Path) -> Result<BinaryMask> {
    check_magic(bytes, MASK_MAGIC, path)?;
    if bytes.len() < MASK_HEADER {
        return Err(Error::Truncated {
            path: path.into(),
            expected: MASK_HEADER,
            found: bytes.len(),
        });
    }
    let version = read_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion {
            path: path.into(),
            version,
        });
    }
    let (h, w) = (read_u32(bytes, 8) as usize, read_u32(bytes, 12) as usize);
    let expected = MASK_HEADER + h * w;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    BinaryMask::new(h, w, bytes[MASK_HEADER..expected].to_vec())
}

pub fn write_mask_file(m: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_mask(m)).map_err(|e| Error::io(path, e))
}

pub fn read_mask_file(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes, path)
}

pub(crate) fn check_magic(bytes: &[u8], expected: [u8; 4], path: &Path) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: 4,
            found: bytes.len(),
        });
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != expected {
        return Err(Error::BadMagic {
            path: path.into(),
            expected,
            found,
        });
    }
    Ok(())
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}
