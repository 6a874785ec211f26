//! Binary PGM (`P5`) and PPM (`P6`) images with maxval 255.
//!
//! A byte `v` maps to `2 v / 255 - 1`; saving rounds to the nearest byte
//! after clamping to `[-1, 1]`. Images are `[H, W, 1]` for PGM and
//! `[H, W, 3]` for PPM.

use std::path::Path;

use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::tensor::Tensor;

pub fn byte_to_real(v: u8) -> f64 {
    2.0 * (v as f64 / 255.0) - 1.0
}

pub fn real_to_byte(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        format: "PNM",
        offset,
        msg: msg.into(),
    }
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(format_err(0, "expected magic P5 or P6")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        let mut saw_space = false;
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => {
                    saw_space = true;
                    pos += 1;
                }
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        if !saw_space {
            return Err(format_err(pos, "expected whitespace"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(pos, format!("expected header field {}", k + 1)));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(start, "header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format_err(2, format!("empty image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(format_err(pos, format!("maxval {maxval} is not 255")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err(pos, "expected a single whitespace after maxval")),
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos,
    })
}

/// Raw bytes and shape `[H, W, C]`.
pub fn decode_bytes(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    let h = parse_header(bytes)?;
    let n = h
        .width
        .checked_mul(h.height)
        .and_then(|v| v.checked_mul(h.channels))
        .ok_or_else(|| format_err(2, "image too large"))?;
    let end = h.data_start + n;
    if bytes.len() < end {
        return Err(format_err(bytes.len(), format!("pixel data truncated, need {n} bytes")));
    }
    if bytes.len() > end {
        return Err(format_err(end, "trailing bytes after pixel data"));
    }
    Ok((vec![h.height, h.width, h.channels], bytes[h.data_start..end].to_vec()))
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let (shape, raw) = decode_bytes(bytes)?;
    Ok(Tensor::from_parts(shape, raw.into_iter().map(byte_to_real).collect()))
}

pub fn encode_bytes(shape: &[usize], raw: &[u8]) -> Result<Vec<u8>> {
    let (h, w, magic) = match shape {
        [h, w, 1] => (*h, *w, "P5"),
        [h, w, 3] => (*h, *w, "P6"),
        other => {
            return Err(Error::invalid(
                "pnm::encode",
                format!("expected [H, W, 1] or [H, W, 3], got {other:?}"),
            ))
        }
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(raw);
    Ok(out)
}

pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let raw: Vec<u8> = image.data().iter().map(|&x| real_to_byte(x)).collect();
    encode_bytes(image.shape(), &raw)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(image)?).map_err(|e| Error::io(path, e))
}

/// Mask as a PGM with values 0 and 255.
pub fn save_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = mask.cells().iter().map(|&c| if c { 255 } else { 0 }).collect();
    let bytes = encode_bytes(&[mask.height(), mask.width(), 1], &raw)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a single-channel mask; bytes must be exactly 0 or 255.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (shape, raw) = decode_bytes(&bytes)?;
    if shape[2] != 1 {
        return Err(Error::invalid("load_mask", "mask must be a P5 image"));
    }
    let start = bytes.len() - raw.len();
    let cells = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| match v {
            0 => Ok(false),
            255 => Ok(true),
            _ => Err(format_err(start + i, format!("mask byte {v} is not 0 or 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(shape[0], shape[1], cells)
}
