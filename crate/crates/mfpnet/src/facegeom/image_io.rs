//! Grayscale images as `f64` buffers, plus PNG/PGM loading and saving.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image. Values are nominally in `[0, 1]` (loaders
/// divide 8-bit data by 255) but intermediate processing may leave the
/// range; savers clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl FaceImage {
    pub fn new(width: usize, height: usize) -> Self {
        FaceImage { width, height, pixels: vec![0.0; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "{}x{} image needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(FaceImage { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        assert!(x < self.width && y < self.height, "pixel out of range");
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        assert!(x < self.width && y < self.height, "pixel out of range");
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear sample at a continuous position; anything outside the
    /// image reads as zero.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let xi = x0 as i64 + dx;
                let yi = y0 as i64 + dy;
                if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                    continue;
                }
                acc += w * self.pixels[yi as usize * self.width + xi as usize];
            }
        }
        acc
    }
}

/// Loads a grayscale image (PNG or PGM); other channels collapse to luma.
pub fn load_image(path: &Path) -> Result<FaceImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.into(), message: e.to_string() })?;
    let gray = img.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let pixels = gray.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    FaceImage::from_pixels(w, h, pixels)
}

/// Saves as 8-bit grayscale; the format follows the file extension
/// (`.png` or `.pgm`). Values clamp to `[0, 1]` before quantization.
pub fn save_image(img: &FaceImage, path: &Path) -> Result<()> {
    let data: Vec<u8> = img
        .pixels()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buffer = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, data)
        .ok_or_else(|| Error::Shape("image dimensions overflow".to_string()))?;
    buffer
        .save(path)
        .map_err(|e| Error::Image { path: path.into(), message: e.to_string() })
}
