//! RGB image container with PNG I/O.
//!
//! Pixels are stored row-major, interleaved RGB, as `f64` in `[0, 1]` at
//! external boundaries. Intermediate math (gradients, residuals) may exceed
//! the range; clamping happens when crossing an external boundary (PNG).

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for p in img.pixels.chunks_exact_mut(3) {
            p.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = self.idx(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = self.idx(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn require_same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.width, self.height),
                got: format!("{}x{}", other.width, other.height),
            })
        }
    }

    /// BT.601 luminance plane.
    pub fn luminance(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Copy with every value clamped to `[0, 1]`.
    pub fn clamped(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Quantized 8-bit bytes, the exact bytes PNG export stores.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("{} bytes", width * height * 3),
                got: format!("{} bytes", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            pixels: data.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut bytes: Vec<u8> = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut bytes);
        image::ImageEncoder::write_image(
            enc,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Parse(format!("png encode: {e}")))?;
        atomic_write(path, &bytes)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Parse(format!("png decode {}: {e}", path.display())))?
            .to_rgb8();
        Self::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }

    /// Per-pixel standard deviation across all channels.
    pub fn pixel_std(&self) -> f64 {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().sum::<f64>() / n;
        let var = self.pixels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        var.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless_on_8bit_values() {
        let img = ImageBuffer::from_fn(9, 7, |x, y| {
            [
                (x * 31 % 256) as f64 / 255.0,
                (y * 57 % 256) as f64 / 255.0,
                ((x + y) * 13 % 256) as f64 / 255.0,
            ]
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        img.save_png(&p).unwrap();
        let back = ImageBuffer::load_png(&p).unwrap();
        assert_eq!(img.to_rgb8(), back.to_rgb8());
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn luminance_weights() {
        let img = ImageBuffer::filled(2, 2, [1.0, 0.0, 0.0]);
        assert!((img.luminance()[0] - 0.299).abs() < 1e-12);
    }
}
