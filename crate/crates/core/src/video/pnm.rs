//! Binary netpbm frames: 8-bit P5 (gray) and P6 (RGB).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6 (interleaved RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("missing or malformed {what}"))
    }
}

/// Decodes a P5 or P6 image with maxval up to 255.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<RawFrame, String> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err("unsupported magic (need P5 or P6)".into()),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("zero dimension {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported (8-bit only)"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err("truncated header".into()),
    }
    let need = width * height * channels;
    let raster = &bytes[h.pos..];
    if raster.len() < need {
        return Err(format!("truncated payload: {} of {need} bytes", raster.len()));
    }
    let mut pixels = raster[..need].to_vec();
    if maxval != 255 {
        for p in &mut pixels {
            *p = ((*p as u32 * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8;
        }
    }
    Ok(RawFrame {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn read_pnm(path: &Path) -> Result<RawFrame> {
    let bytes = fs::read(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_pnm(&bytes).map_err(|message| Error::Ingest {
        path: path.to_path_buf(),
        message,
    })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if width == 0 || height == 0 || pixels.len() != width * height {
        return Err(Error::shape(format!(
            "{} pixels for a {width}x{height} PGM",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)?)?;
    Ok(())
}

/// `[0, 1]` intensity to an 8-bit level (clamped, rounded).
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(p: u8) -> f32 {
    p as f32 / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let px: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
        let bytes = encode_pgm(4, 3, &px).unwrap();
        let f = decode_pnm(&bytes).unwrap();
        assert_eq!((f.width, f.height, f.channels), (4, 3, 1));
        assert_eq!(f.pixels, px);
        assert_eq!(encode_pgm(4, 3, &f.pixels).unwrap(), bytes);
    }

    #[test]
    fn ppm_with_comments() {
        let mut bytes = b"P6\n# made by hand\n2 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let f = decode_pnm(&bytes).unwrap();
        assert_eq!((f.width, f.height, f.channels), (2, 1, 3));
        assert_eq!(f.pixels, vec![255, 0, 0, 0, 255, 0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(decode_pnm(b"P2\n1 1\n255\n0").unwrap_err().contains("magic"));
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00\x01").unwrap_err().contains("truncated"));
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").unwrap_err().contains("maxval"));
        assert!(decode_pnm(b"P5\n1").is_err());
    }

    #[test]
    fn maxval_rescaled() {
        let f = decode_pnm(b"P5\n2 1\n15\n\x00\x0f").unwrap();
        assert_eq!(f.pixels, vec![0, 255]);
    }

    #[test]
    fn quantize_round_trips() {
        for p in 0..=255u8 {
            assert_eq!(quantize(dequantize(p)), p);
        }
    }
}
