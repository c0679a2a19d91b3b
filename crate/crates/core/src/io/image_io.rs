//! Binary PPM/PGM (8-bit) and a float raster format.
//!
//! Float raster layout: magic `FRST`, then width, height, channels as
//! little-endian `u32`, then `width·height·channels` little-endian `f32` samples.

use std::fs;
use std::path::Path;

use super::IoError;
use crate::image::Image;

pub const RASTER_MAGIC: &[u8; 4] = b"FRST";

/// `floor(255·v + 0.5)` clamped to `0..=255`.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Encodes a 1-channel image as `P5` or a 3-channel image as `P6`.
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>, IoError> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(IoError::Unsupported(format!("{c}-channel PNM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn malformed(msg: &str) -> IoError {
    IoError::Malformed(msg.to_string())
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image, IoError> {
    let mut pos = 0;
    let mut token = || -> Result<String, IoError> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("truncated PNM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(IoError::Malformed(format!("unsupported PNM magic {m}"))),
    };
    let mut num = || -> Result<usize, IoError> {
        token()?
            .parse()
            .map_err(|_| malformed("non-numeric PNM header field"))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 255 {
        return Err(malformed("only 8-bit PNM is supported"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    let start = pos + 1;
    let n = w * h * channels;
    if bytes.len() < start + n {
        return Err(malformed("PNM sample data is truncated"));
    }
    let data = bytes[start..start + n]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Image::from_vec(w, h, channels, data).ok_or_else(|| malformed("PNM size mismatch"))
}

pub fn encode_raster(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * img.len());
    out.extend_from_slice(RASTER_MAGIC);
    for d in [img.width(), img.height(), img.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in img.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_raster(bytes: &[u8]) -> Result<Image, IoError> {
    if bytes.len() < 16 || &bytes[..4] != RASTER_MAGIC {
        return Err(malformed("missing float raster header"));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| malformed("float raster dimensions overflow"))?;
    if bytes.len() != 16 + 4 * n {
        return Err(malformed("float raster length does not match its header"));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Image::from_vec(w, h, c, data).ok_or_else(|| malformed("float raster size mismatch"))
}

/// Writes by extension: `.ppm`/`.pgm` as 8-bit, anything else as float raster.
pub fn write_image(path: &Path, img: &Image) -> Result<(), IoError> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") | Some("pgm") => encode_pnm(img)?,
        _ => encode_raster(img),
    };
    fs::write(path, bytes).map_err(|e| IoError::file(path, e))
}

pub fn read_image(path: &Path) -> Result<Image, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::file(path, e))?;
    if bytes.starts_with(RASTER_MAGIC) {
        decode_raster(&bytes)
    } else {
        decode_pnm(&bytes)
    }
}

/// Blue-to-red heatmap of a single-channel image scaled to its maximum.
pub fn heatmap(img: &Image) -> Image {
    let max = img
        .data()
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut out = Image::new(img.width(), img.height(), 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let t = (img.get(x, y, 0) * scale).clamp(0.0, 1.0);
            out.set(x, y, 0, t);
            out.set(x, y, 1, 1.0 - (2.0 * t - 1.0).abs());
            out.set(x, y, 2, 1.0 - t);
        }
    }
    out
}
