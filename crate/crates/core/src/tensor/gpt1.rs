//! `GPT1` binary tensor files.
//!
//! Layout: the magic bytes `GPT1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` extents, then the row-major payload as little-endian
//! IEEE-754 `f32`. Values are narrowed to `f32` on write.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GPT1";

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&dim_u32(t.ndim())?.to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&dim_u32(d)?.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn dim_u32(d: usize) -> Result<u32> {
    u32::try_from(d).map_err(|_| Error::invalid("gpt1::encode", format!("extent {d} exceeds u32")))
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        format: "GPT1",
        offset,
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(offset, "unexpected end of data"))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(format_err(0, "missing GPT1 magic"));
    }
    let ndim = read_u32(bytes, 4)? as usize;
    let mut shape = Vec::with_capacity(ndim.min(16));
    let mut offset = 8;
    for _ in 0..ndim {
        shape.push(read_u32(bytes, offset)? as usize);
        offset += 4;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(8, "element count overflows"))?;
    let expected = numel
        .checked_mul(4)
        .and_then(|n| n.checked_add(offset))
        .ok_or_else(|| format_err(8, "payload size overflows"))?;
    if bytes.len() != expected {
        return Err(format_err(
            bytes.len().min(expected),
            format!("payload needs {expected} bytes in total, found {}", bytes.len()),
        ));
    }
    let data = bytes[offset..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| match e {
        Error::NonFinite { index, .. } => format_err(offset + 4 * index, "non-finite value"),
        other => other,
    })
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
