//! Grayscale rasters in `[0, 1]`, with 8-bit PNG I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, `height * width` values.
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn min(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn l1_distance(&self, other: &GrayImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// Copies the integer rectangle `[x1, x2) × [y1, y2)`; the caller clamps.
    pub fn crop(&self, x1: usize, y1: usize, x2: usize, y2: usize) -> GrayImage {
        let w = x2.saturating_sub(x1);
        let h = y2.saturating_sub(y1);
        let mut out = GrayImage::new(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x1 + x, y1 + y));
            }
        }
        out
    }

    /// Bilinear resample to `size × size`. Returns a clone when already that size.
    pub fn resize_square(&self, size: usize) -> GrayImage {
        if self.width == size && self.height == size {
            return self.clone();
        }
        let mut out = GrayImage::new(size, size, 0.0);
        if self.width == 0 || self.height == 0 {
            return out;
        }
        let sx = self.width as f64 / size as f64;
        let sy = self.height as f64 / size as f64;
        for y in 0..size {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..size {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                let top = self.get(x0, y0) * (1.0 - tx) + self.get(x1, y0) * tx;
                let bot = self.get(x0, y1) * (1.0 - tx) + self.get(x1, y1) * tx;
                out.set(x, y, top * (1.0 - ty) + bot * ty);
            }
        }
        out
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Rounds pixels to the 8-bit grid, matching a PNG save/load round trip.
    pub fn quantized(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.to_u8().into_iter().map(|b| b as f64 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .ok_or_else(|| Error::Internal("raster buffer size".into()))?;
        buf.save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }

    pub fn load_png(path: &Path) -> Result<GrayImage> {
        let img = image::open(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?
            .to_luma8();
        let (w, h) = img.dimensions();
        let pixels = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        GrayImage::from_pixels(w as usize, h as usize, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_matches_quantized() {
        let mut img = GrayImage::new(5, 3, 0.0);
        for (i, p) in img.pixels.iter_mut().enumerate() {
            *p = i as f64 / 14.0;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = GrayImage::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn resize_identity_and_crop() {
        let img = GrayImage::from_pixels(2, 2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        assert_eq!(img.resize_square(2), img);
        let c = img.crop(1, 0, 2, 2);
        assert_eq!(c.pixels, vec![1.0, 0.25]);
        let up = img.resize_square(4);
        assert!(up.min() >= 0.0 && up.max() <= 1.0);
    }
}
