//! Versioned checkpoint container shared by `codec.ckpt` and `flow.ckpt`.
//!
//! Layout (little-endian): 4-byte magic, `u32` version, `u32` header length,
//! UTF-8 JSON header, `u32` parameter count, parameters as `f32`, then a CRC32
//! over every preceding byte.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("expected magic {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("checksum mismatch")]
    Checksum,
    #[error("truncated container")]
    Truncated,
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode<H: Serialize>(magic: &[u8; 4], header: &H, params: &[f64]) -> Result<Vec<u8>, ContainerError> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + header.len() + params.len() * 4 + 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for &p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 4], bytes: &[u8]) -> Result<(H, Vec<f64>), ContainerError> {
    if bytes.len() < 16 {
        return Err(ContainerError::Truncated);
    }
    if &bytes[..4] != magic {
        return Err(ContainerError::BadMagic {
            expected: String::from_utf8_lossy(magic).into(),
            found: String::from_utf8_lossy(&bytes[..4]).into(),
        });
    }
    let word = |at: usize| -> Result<u32, ContainerError> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or(ContainerError::Truncated)
    };
    let version = word(4)?;
    if version != CONTAINER_VERSION {
        return Err(ContainerError::Version(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(ContainerError::Checksum);
    }
    let header_len = word(8)? as usize;
    let header_end = 12 + header_len;
    let header_bytes = body.get(12..header_end).ok_or(ContainerError::Truncated)?;
    let header = serde_json::from_slice(header_bytes)?;
    let count = word(header_end)? as usize;
    let start = header_end + 4;
    if body.len() != start + count * 4 {
        return Err(ContainerError::Truncated);
    }
    let params = body[start..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((header, params))
}

pub fn write<H: Serialize>(path: impl AsRef<Path>, magic: &[u8; 4], header: &H, params: &[f64]) -> Result<(), ContainerError> {
    fs::write(path, encode(magic, header, params)?)?;
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: impl AsRef<Path>, magic: &[u8; 4]) -> Result<(H, Vec<f64>), ContainerError> {
    decode(magic, &fs::read(path)?)
}

/// Rounds every value to the nearest `f32` so that a container roundtrip is lossless.
pub fn round_to_f32(values: &mut [f64]) {
    for v in values {
        *v = f64::from(*v as f32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let mut params = vec![0.1, -2.5, 3.0e-7];
        round_to_f32(&mut params);
        let bytes = encode(b"TEST", &serde_json::json!({"k": 1}), &params).unwrap();
        let (h, p): (serde_json::Value, Vec<f64>) = decode(b"TEST", &bytes).unwrap();
        assert_eq!(h["k"], 1);
        assert_eq!(p, params);

        assert!(matches!(decode::<serde_json::Value>(b"ABCD", &bytes), Err(ContainerError::BadMagic { .. })));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 6] ^= 1;
        assert!(matches!(decode::<serde_json::Value>(b"TEST", &bad), Err(ContainerError::Checksum)));
    }
}
