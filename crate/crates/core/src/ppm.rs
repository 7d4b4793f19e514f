//! Binary PPM (P6, maxval 255) reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major `RGBRGB…`, `3 · width · height` bytes.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; 3 * width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` with channels scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut data = vec![0.0f32; 3 * plane];
        for (p, rgb) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = f32::from(rgb[c]) / 255.0;
            }
        }
        Tensor::from_parts(vec![3, self.height, self.width], data)
    }

    /// Inverse of [`RgbImage::to_tensor`], clamping and rounding to 8 bits.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (c, h, w) = match t.dims() {
            [c, h, w] => (*c, *h, *w),
            [1, c, h, w] => (*c, *h, *w),
            dims => {
                return Err(Error::config(format!(
                    "expected a [3, H, W] image tensor, got {dims:?}"
                )))
            }
        };
        if c != 3 {
            return Err(Error::config(format!("expected 3 channels, got {c}")));
        }
        let plane = h * w;
        let mut img = Self::new(w, h);
        for p in 0..plane {
            for ch in 0..3 {
                let v = t.data()[ch * plane + p].clamp(0.0, 1.0);
                img.pixels[3 * p + ch] = (v * 255.0).round() as u8;
            }
        }
        Ok(img)
    }
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
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
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, format!("{what} out of range")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format(0, "not a binary PPM (missing P6 magic)"));
    }
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(r.pos, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(Error::format(r.pos, "missing whitespace after maxval"));
    }
    let start = r.pos + 1;
    let len = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| Error::format(2, "image dimensions overflow"))?;
    if bytes.len() - start < len {
        return Err(Error::format(
            bytes.len(),
            format!("truncated raster: need {len} bytes, have {}", bytes.len() - start),
        ));
    }
    Ok(RgbImage {
        width,
        height,
        pixels: bytes[start..start + len].to_vec(),
    })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Decode a PPM file into a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    Ok(read_ppm(path)?.to_tensor())
}
