//! Binary PPM (P6) and PGM (P5) images and bilinear resizing.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Interleaved image with values scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("image header: missing {what}")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::Format("not a binary PPM (P6) or PGM (P5) image".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("image has zero extent {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("image maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = h.pos + 1;
    let wide = maxval > 255;
    let count = width * height * channels;
    let need = count * if wide { 2 } else { 1 };
    let raster = bytes
        .get(start..start + need)
        .ok_or_else(|| Error::Format(format!("image raster truncated: need {need} bytes")))?;
    let scale = 1.0 / maxval as f32;
    let pixels = if wide {
        raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 * scale).collect()
    } else {
        raster.iter().map(|&b| b as f32 * scale).collect()
    };
    Ok(Image {
        width,
        height,
        channels,
        pixels,
    })
}

/// Encodes 8-bit interleaved RGB as P6.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "RGB buffer size");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let src = |o: usize, s: f64, n: usize| {
        let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
        let p0 = p.floor() as usize;
        (p0, (p0 + 1).min(n - 1), p - p0 as f64)
    };
    let mut pixels = Vec::with_capacity(height * width * img.channels);
    for y in 0..height {
        let (y0, y1, fy) = src(y, sy, img.height);
        for x in 0..width {
            let (x0, x1, fx) = src(x, sx, img.width);
            for c in 0..img.channels {
                let p = |yy, xx| img.at(yy, xx, c) as f64;
                let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                let bottom = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                pixels.push((top + (bottom - top) * fy) as f32);
            }
        }
    }
    Image {
        width,
        height,
        channels: img.channels,
        pixels,
    }
}

/// Planar `(1, 3, H, W)` tensor of `(v - mean[c]) / std[c]`; gray is replicated.
pub fn to_tensor(img: &Image, mean: [f32; 3], std: [f32; 3]) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 3, img.height, img.width), |_, c, y, x| {
        let v = img.at(y, x, if img.channels == 1 { 0 } else { c });
        (v - mean[c]) / std[c]
    })
}
