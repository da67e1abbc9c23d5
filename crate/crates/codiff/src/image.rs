//! Image patches: the unit of all image I/O and loss computation.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// An H×W×3 grid of reals in [0, 1], stored row-major interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
}

impl ImagePatch {
    pub fn new(pixels: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::domain("image must be non-empty"));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::shape(
                "ImagePatch pixels",
                height * width * 3,
                pixels.len(),
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            pixels,
            height,
            width,
        })
    }

    /// Constant-valued image, `value` in [0, 1].
    pub fn constant(value: f32, height: usize, width: usize) -> Result<Self> {
        Self::new(vec![value; height * width * 3], height, width)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::domain(format!(
                "crop {height}x{width}@({top},{left}) exceeds image bounds {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let start = (y * self.width + left) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        Ok(Self {
            pixels,
            height,
            width,
        })
    }

    /// Channel-first (3, H, W) tensor suitable for network input.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Converts a (3, H, W) tensor back to a patch, clamping to [0, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape("ImagePatch tensor channels", 3usize, c));
        }
        let t = t
            .clamp(0.0, 1.0)?
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?;
        let pixels = t.to_vec1::<f32>()?;
        Ok(Self {
            pixels,
            height: h,
            width: w,
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(pixels, h as usize, w as usize)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions");
        img.save(path)?;
        Ok(())
    }

    /// 8-bit interleaved RGB bytes (rounded), used by the JFIF export path.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(bytes: &[u8], height: usize, width: usize) -> Result<Self> {
        let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        Self::new(pixels, height, width)
    }

    /// Mean of squared pixel differences against another patch of equal size.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(
                "mse operands",
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        Ok(sum / self.pixels.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImagePatch::new(vec![1.5; 12], 2, 2).is_err());
        assert!(ImagePatch::new(vec![-0.1; 12], 2, 2).is_err());
    }

    #[test]
    fn rejects_empty_image() {
        assert!(ImagePatch::new(vec![], 0, 0).is_err());
    }

    #[test]
    fn crop_roundtrip() {
        let mut img = ImagePatch::constant(0.5, 8, 8).unwrap();
        img.set(3, 2, 0, 0.25);
        let c = img.crop(2, 1, 4, 4).unwrap();
        assert_eq!(c.get(1, 1, 0), 0.25);
        assert!(img.crop(5, 5, 4, 4).is_err());
    }

    #[test]
    fn tensor_roundtrip() {
        let dev = Device::Cpu;
        let mut img = ImagePatch::constant(0.25, 4, 6).unwrap();
        img.set(1, 2, 1, 0.75);
        let t = img.to_tensor(&dev, DType::F32).unwrap();
        assert_eq!(t.dims(), &[3, 4, 6]);
        let back = ImagePatch::from_tensor(&t).unwrap();
        assert_eq!(img, back);
    }
}
