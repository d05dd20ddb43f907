use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {}x{}x3 = {} bytes, got {}",
                height,
                width,
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    /// Builds an image from floating point channel values, rounding and
    /// clamping each to [0, 255].
    pub fn from_f32(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|v| {
                if v.is_nan() {
                    0
                } else {
                    v.round().clamp(0.0, 255.0) as u8
                }
            })
            .collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_dims(&self, other: &ImageBuffer) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "image dimensions differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Rec. 601 luma per pixel, in 0..=255 units.
    pub fn luma(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Planar CHW values mapped linearly from [0,255] to [lo, hi].
    pub fn to_chw(&self, lo: f32, hi: f32) -> Vec<f32> {
        let plane = self.height * self.width;
        let mut out = vec![0f32; plane * 3];
        let scale = (hi - lo) / 255.0;
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = lo + px[c] as f32 * scale;
            }
        }
        out
    }

    /// Inverse of [`ImageBuffer::to_chw`].
    pub fn from_chw(height: usize, width: usize, values: &[f32], lo: f32, hi: f32) -> Result<Self> {
        let plane = height * width;
        if values.len() != plane * 3 {
            return Err(Error::Shape(format!(
                "expected {} planar values, got {}",
                plane * 3,
                values.len()
            )));
        }
        let scale = 255.0 / (hi - lo);
        let mut interleaved = vec![0f32; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                interleaved[i * 3 + c] = (values[c * plane + i] - lo) * scale;
            }
        }
        Self::from_f32(height, width, &interleaved)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::new(h as usize, w as usize, rgb.into_raw())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::Shape("pixel buffer does not match dimensions".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Mean absolute channel difference, 0..=255 units.
    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> Result<f64> {
        self.ensure_same_dims(other)?;
        let total: u64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| a.abs_diff(*b) as u64)
            .sum();
        Ok(total as f64 / self.pixels.len() as f64)
    }
}
