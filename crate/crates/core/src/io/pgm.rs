//! 8/16-bit grayscale PGM (`P5` binary and `P2` ASCII), mapped to `[0, 1]`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image2D;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("PGM: {}", msg.into()))
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn skip_space_and_comments(&mut self) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                return;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err("truncated header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(format!("bad {what}")))
    }
}

/// Decodes a PGM into an image with values `sample / maxval`.
pub fn decode(bytes: &[u8]) -> Result<Image2D> {
    let mut h = Header { bytes, pos: 0 };
    let magic = h.token()?;
    let binary = match magic {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(format_err("expected P5 or P2 magic")),
    };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format_err("zero-sized image"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(format!("maxval {maxval} out of range")));
    }
    let count = width.checked_mul(height).ok_or_else(|| format_err("dimensions overflow"))?;
    let scale = 1.0 / maxval as f64;
    let mut data = Vec::new();
    if binary {
        if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
            return Err(format_err("missing data"));
        }
        let payload = &bytes[h.pos + 1..];
        let bps = if maxval < 256 { 1 } else { 2 };
        let needed = count.checked_mul(bps).ok_or_else(|| format_err("dimensions overflow"))?;
        if payload.len() < needed {
            return Err(format_err(format!("expected {needed} data bytes, found {}", payload.len())));
        }
        data.reserve(count);
        for k in 0..count {
            let v = if bps == 1 {
                payload[k] as usize
            } else {
                u16::from_be_bytes([payload[2 * k], payload[2 * k + 1]]) as usize
            };
            if v > maxval {
                return Err(format_err(format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 * scale);
        }
    } else {
        for _ in 0..count {
            let v = h.number("sample")?;
            if v > maxval {
                return Err(format_err(format!("sample {v} exceeds maxval {maxval}")));
            }
            data.push(v as f64 * scale);
        }
    }
    Image2D::from_vec(height, width, 1.0, 1.0, data)
}

/// 8-bit binary preview: `[0, 1]` mapped linearly to `[0, 255]`, clamped.
pub fn encode_preview(img: &Image2D) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn read(path: impl AsRef<Path>) -> Result<Image2D> {
    decode(&std::fs::read(path)?)
}

pub fn write_preview(path: impl AsRef<Path>, img: &Image2D) -> Result<()> {
    std::fs::write(path, encode_preview(img))?;
    Ok(())
}
