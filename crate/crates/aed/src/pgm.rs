//! Binary PGM ("P5", maxval 255) reader and writer.

use crate::error::{Error, Result};
use crate::ink::RasterImage;

/// Header is exactly `P5\n<width> <height>\n255\n`, then raw bytes.
pub fn write_pgm(img: &RasterImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn read_pgm(bytes: &[u8]) -> Result<RasterImage> {
    // header tokens separated by ascii whitespace
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    if magic != "P5" {
        return Err(Error::Format(format!(
            "unsupported PGM magic {magic:?}, expected \"P5\""
        )));
    }
    let width: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Format("bad PGM width".into()))?;
    let height: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Format("bad PGM height".into()))?;
    let maxval: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Format("bad PGM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "unsupported PGM maxval {maxval}, expected 255"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Format("zero PGM dimension".into()));
    }
    // exactly one whitespace byte after maxval
    pos += 1;
    let want = width * height;
    if bytes.len() < pos + want {
        return Err(Error::Format(format!(
            "PGM pixel data truncated: want {want} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    Ok(RasterImage {
        width,
        height,
        pixels: bytes[pos..pos + want].to_vec(),
    })
}
