//! Shared layout of the toolkit's binary files:
//!
//! ```text
//! magic        4 bytes
//! header_len   u32 little-endian
//! header       header_len bytes of UTF-8 JSON
//! payload      f64 little-endian values (count given by the header)
//! crc32        u32 little-endian, over header_len, header and payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn encode(magic: &[u8; 4], header: &[u8], payload: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Splits a file into its JSON header and payload bytes after checking the
/// magic, framing and checksum.
pub(crate) fn decode<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::Version {
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated("missing header length or checksum".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if 8 + header_len > body_end {
        return Err(Error::Truncated(format!(
            "header of {header_len} bytes exceeds file of {} bytes",
            bytes.len()
        )));
    }
    let computed = crc32fast::hash(&bytes[4..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header = &bytes[8..8 + header_len];
    let payload = &bytes[8 + header_len..body_end];
    if payload.len() % 8 != 0 {
        return Err(Error::Truncated(format!(
            "payload of {} bytes is not a whole number of f64 values",
            payload.len()
        )));
    }
    Ok((header, payload))
}

pub(crate) fn read_f64s(payload: &[u8]) -> Vec<f64> {
    payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}
