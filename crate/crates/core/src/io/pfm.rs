//! Portable FloatMap, grayscale `Pf` variant.
//!
//! Written little-endian (negative scale) with rows stored bottom-to-top, per
//! the format convention. Samples are stored as `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image2D;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("PFM: {}", msg.into()))
}

/// Splits off the next whitespace-delimited header token.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err("truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| format_err("non-ASCII header"))
}

/// Decodes a grayscale PFM. Spacing defaults to 1 mm; callers usually apply
/// sidecar metadata afterwards.
pub fn decode(bytes: &[u8]) -> Result<Image2D> {
    let mut pos = 0;
    match next_token(bytes, &mut pos)? {
        "Pf" => {}
        "PF" => return Err(format_err("color PFM (PF) is not supported")),
        other => return Err(format_err(format!("bad magic '{other}'"))),
    }
    let width: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| format_err("bad width"))?;
    let height: usize = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| format_err("bad height"))?;
    let scale: f32 = next_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| format_err("bad scale"))?;
    if !scale.is_finite() || scale == 0.0 {
        return Err(format_err("scale must be finite and non-zero"));
    }
    if width == 0 || height == 0 {
        return Err(format_err("zero-sized image"));
    }
    // exactly one whitespace byte separates the header from the samples
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err("missing data"));
    }
    pos += 1;
    let count = width.checked_mul(height).ok_or_else(|| format_err("dimensions overflow"))?;
    let needed = count.checked_mul(4).ok_or_else(|| format_err("dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() != needed {
        return Err(format_err(format!(
            "expected {needed} data bytes for {width}x{height}, found {}",
            payload.len()
        )));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; count];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        if !v.is_finite() {
            return Err(format_err(format!("non-finite sample at index {k}")));
        }
        let (file_row, col) = (k / width, k % width);
        data[(height - 1 - file_row) * width + col] = v as f64;
    }
    Image2D::from_vec(height, width, 1.0, 1.0, data)
}

pub fn encode(img: &Image2D) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.cols(), img.rows()).into_bytes();
    out.reserve(img.len() * 4);
    for i in (0..img.rows()).rev() {
        for j in 0..img.cols() {
            out.extend_from_slice(&(img.get(i, j) as f32).to_le_bytes());
        }
    }
    out
}

pub fn read(path: impl AsRef<Path>) -> Result<Image2D> {
    decode(&std::fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, img: &Image2D) -> Result<()> {
    std::fs::write(path, encode(img))?;
    Ok(())
}
