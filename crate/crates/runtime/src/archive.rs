//! Binary container shared by checkpoints and the feature cache: an 8-byte
//! magic, a little-endian `u64` header length, a JSON header, then raw
//! little-endian `f32` data.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{io_err, Result, RuntimeError};

pub fn write<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, data: &[f32]) -> Result<()> {
    let header = serde_json::to_vec(header).map_err(|e| RuntimeError::Config(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + 4 * data.len());
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |m: &str| RuntimeError::Checkpoint {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(bad("unrecognized file format"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: H = serde_json::from_slice(&bytes[16..end]).map_err(|e| bad(&format!("bad header: {e}")))?;
    let body = &bytes[end..];
    if body.len() % 4 != 0 {
        return Err(bad("truncated data"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, data))
}
