//! Binary PGM (`P5`, maxval 255) reader and writer. The reader follows the
//! netpbm header grammar: whitespace-separated tokens with `#` comments
//! running to end of line, then a single whitespace byte before the raster.

use std::fs;
use std::path::Path;

use super::IoError;
use crate::types::GrayImage;

pub fn write_pgm(image: &GrayImage, path: &Path) -> Result<(), IoError> {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend_from_slice(&image.data);
    fs::write(path, bytes)?;
    Ok(())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], IoError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(IoError::Binary {
            offset: start,
            message: "unexpected end of PGM header".into(),
        });
    }
    Ok(&bytes[start..*pos])
}

fn parse_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize, IoError> {
    let start = *pos;
    let token = next_token(bytes, pos)?;
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IoError::Binary {
            offset: start,
            message: format!("invalid PGM {what}"),
        })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, IoError> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(IoError::Binary {
            offset: 0,
            message: format!("bad magic {:?}, expected \"P5\"", String::from_utf8_lossy(magic)),
        });
    }
    let width = parse_number(&bytes, &mut pos, "width")?;
    let height = parse_number(&bytes, &mut pos, "height")?;
    let maxval_at = pos;
    let maxval = parse_number(&bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(IoError::Binary {
            offset: maxval_at,
            message: format!("unsupported maxval {maxval}, expected 255"),
        });
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(IoError::Binary {
            offset: pos,
            message: "missing whitespace before PGM raster".into(),
        });
    }
    pos += 1;
    let expected = width * height;
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(IoError::Binary {
            offset: pos + raster.len(),
            message: format!(
                "raster truncated: {} of {expected} bytes present",
                raster.len()
            ),
        });
    }
    GrayImage::from_raw(width, height, raster[..expected].to_vec()).ok_or(IoError::Binary {
        offset: pos,
        message: "raster dimensions overflow".into(),
    })
}
