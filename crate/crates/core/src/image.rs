//! Binary PPM (P6) and PGM (P5) readers/writers, maxval 255.
//!
//! The writers emit canonical headers (`P6\n<w> <h>\n255\n`) so files are
//! byte-comparable; the readers accept standard whitespace and `#` comments
//! but reject anything structurally malformed without returning partial data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::TensorBase;
use crate::Tensor;

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn integer(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format("expected integer in PNM header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("unparseable integer in PNM header".into()))
    }
}

fn parse_header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut p = HeaderParser { bytes, pos: 2 };
    let w = p.integer()?;
    let h = p.integer()?;
    let maxval = p.integer()?;
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval}, only 255 is supported")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if p.pos >= bytes.len() || !bytes[p.pos].is_ascii_whitespace() {
        return Err(Error::Format("missing separator before PNM payload".into()));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("zero-extent image".into()));
    }
    Ok((w, h, p.pos + 1))
}

fn check_payload(bytes: &[u8], offset: usize, expected: usize) -> Result<&[u8]> {
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: {} bytes, expected {expected}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "trailing garbage: {} bytes after payload",
            payload.len() - expected
        )));
    }
    Ok(payload)
}

/// Read a binary RGB image; values are `byte / 255` in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let (w, h, offset) = parse_header(&bytes, b"P6")?;
    let payload = check_payload(&bytes, offset, w * h * 3)?;
    Ok(TensorBase::from_fn(vec![h, w, 3], |i| payload[i] as f64 / 255.0))
}

/// Write a binary RGB image; values clamped to [0, 1] and quantized.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::shape(format!("write_ppm expects [H,W,3], got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a binary grayscale map as raw class ids.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let bytes = std::fs::read(path)?;
    let (w, h, offset) = parse_header(&bytes, b"P5")?;
    let payload = check_payload(&bytes, offset, w * h)?;
    Ok((payload.to_vec(), h, w))
}

/// Write raw class ids as a binary grayscale map.
pub fn write_pgm(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::shape(format!(
            "write_pgm: {} values for {h}x{w} mask",
            mask.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(mask);
    std::fs::write(path, out)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
