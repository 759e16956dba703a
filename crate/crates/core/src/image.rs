//! Float rasters and binary PPM (P6) / PGM (P5) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;

/// Interleaved float image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Rounds every value to the nearest 8-bit level so that PPM round trips are exact.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(0, format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
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
        if start == pos {
            return Err(Error::format(pos, "expected header integer"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, "bad header integer"))?;
    }
    if fields[2] != 255 {
        return Err(Error::format(pos, format!("unsupported maxval {}", fields[2])));
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((fields[0], fields[1], pos + 1))
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, offset) = parse_header(bytes, magic)?;
    let need = w * h * channels;
    let have = bytes.len().saturating_sub(offset);
    if have < need {
        return Err(Error::format(bytes.len(), format!("raster truncated: need {need} bytes, have {have}")));
    }
    Ok((w, h, bytes[offset..offset + need].to_vec()))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, raster) = decode(&bytes, b"P6", 3)?;
    Ok(Image {
        width: w,
        height: h,
        channels: 3,
        data: raster.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

/// Writes a 3-channel image as P6 (single-channel images are replicated).
pub fn write_ppm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    let bytes = img.to_bytes();
    match img.channels {
        3 => out.extend_from_slice(&bytes),
        1 => out.extend(bytes.iter().flat_map(|&b| [b, b, b])),
        c => return Err(Error::Config(format!("cannot write {c}-channel image as PPM"))),
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pgm_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, raster) = decode(&bytes, b"P5", 1)?;
    Mask::from_bytes(w, h, &raster)
}

/// 8-bit P5: 0 = background, 255 = foreground.
pub fn write_pgm_mask(path: impl AsRef<Path>, m: &Mask) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", m.width(), m.height()).into_bytes();
    out.extend(m.data().iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Side-by-side overlay: query with its mask tinted red, target with the prediction tinted green.
pub fn overlay_pair(query: &Image, query_mask: &Mask, target: &Image, pred: &Mask) -> Image {
    let w = query.width + target.width;
    let h = query.height.max(target.height);
    let mut out = Image::new(w, h, 3);
    let mut blit = |img: &Image, m: &Mask, x0: usize, tint: [f32; 3]| {
        for y in 0..img.height {
            for x in 0..img.width {
                let px = out.pixel_mut(x0 + x, y);
                for c in 0..3 {
                    let v = img.at(x, y, c.min(img.channels - 1));
                    px[c] = if m.get(x, y) { 0.5 * v + 0.5 * tint[c] } else { v };
                }
            }
        }
    };
    blit(query, query_mask, 0, [1.0, 0.0, 0.0]);
    blit(target, pred, query.width, [0.0, 1.0, 0.0]);
    out
}
