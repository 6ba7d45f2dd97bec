use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An RGB image with channel values in `[0, 1]`, stored row-major as
/// `height × width × 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.pixels.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x3 image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape("mse: image sizes differ".into()));
        }
        let n = self.pixels.len() as f64;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            enc,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Self::from_pixels(h as usize, w as usize, pixels)
    }
}
