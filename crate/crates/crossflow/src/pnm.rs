//! Minimal binary PPM (P6) and PGM (P5) reader/writer, 8-bit only.

use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("unsupported or bad PNM magic")]
    BadMagic,
    #[error("malformed PNM header")]
    BadHeader,
    #[error("only maxval 255 is supported, got {0}")]
    BadMaxval(u32),
    #[error("truncated PNM payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("pixel buffer length {got} does not match {width}x{height}")]
    LengthMismatch { got: usize, width: usize, height: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// 8-bit RGB image, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<(), PnmError> {
    if img.pixels.len() != 3 * img.width * img.height {
        return Err(PnmError::LengthMismatch {
            got: img.pixels.len(),
            width: img.width,
            height: img.height,
        });
    }
    let mut file = std::fs::File::create(path)?;
    write!(file, "P6\n{} {}\n255\n", img.width, img.height)?;
    file.write_all(&img.pixels)?;
    Ok(())
}

pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<(), PnmError> {
    if img.pixels.len() != img.width * img.height {
        return Err(PnmError::LengthMismatch {
            got: img.pixels.len(),
            width: img.width,
            height: img.height,
        });
    }
    let mut file = std::fs::File::create(path)?;
    write!(file, "P5\n{} {}\n255\n", img.width, img.height)?;
    file.write_all(&img.pixels)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage, PnmError> {
    let bytes = std::fs::read(path)?;
    let (width, height, payload) = parse_header(&bytes, b"P6")?;
    let expected = 3 * width * height;
    if payload.len() < expected {
        return Err(PnmError::Truncated { expected, got: payload.len() });
    }
    Ok(RgbImage { width, height, pixels: payload[..expected].to_vec() })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, PnmError> {
    let bytes = std::fs::read(path)?;
    let (width, height, payload) = parse_header(&bytes, b"P5")?;
    let expected = width * height;
    if payload.len() < expected {
        return Err(PnmError::Truncated { expected, got: payload.len() });
    }
    Ok(GrayImage { width, height, pixels: payload[..expected].to_vec() })
}

/// Parse "Px", width, height, maxval; tolerate comments and any whitespace.
/// Returns dimensions and the raw payload after the single whitespace byte
/// that terminates the maxval token.
fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8]), PnmError> {
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(PnmError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(PnmError::BadHeader);
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| PnmError::BadHeader)?;
        *field = text.parse().map_err(|_| PnmError::BadHeader)?;
    }
    if fields[2] != 255 {
        return Err(PnmError::BadMaxval(fields[2]));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PnmError::BadHeader);
    }
    pos += 1;
    Ok((fields[0] as usize, fields[1] as usize, &bytes[pos..]))
}
