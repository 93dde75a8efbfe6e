//! RGB frames as `f32` in `[0, 1]`, HWC layout, plus PNG round-tripping.

use std::io::Cursor;
use std::path::Path;

use storyldm_autodiff::{Real, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width × 3`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` tensor.
    pub fn to_chw<T: Real>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let p = i % (h * w);
            T::lit(self.data[p * 3 + c] as f64)
        })
    }

    /// Inverse of [`Image::to_chw`]; values are clamped to `[0, 1]`.
    pub fn from_chw<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 3 || t.dim(0) != 3 {
            return Err(Error::Shape {
                op: "Image::from_chw",
                expected: vec![3, 0, 0],
                got: t.shape().to_vec(),
            });
        }
        let (h, w) = (t.dim(1), t.dim(2));
        let mut data = vec![0.0; h * w * 3];
        for c in 0..3 {
            for p in 0..h * w {
                let v = t.data()[c * h * w + p].to_f64().unwrap() as f32;
                data[p * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }

    /// 8-bit quantized copy, matching what a PNG round trip yields.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Format("image buffer size".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            data: img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let mut img = Image::filled(4, 5, [0.2, 0.5, 0.9]);
        img.set(1, 2, [0.0, 1.0, 0.33]);
        let back = Image::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img.quantized());
    }

    #[test]
    fn chw_round_trip() {
        let mut img = Image::filled(3, 2, [0.1, 0.2, 0.3]);
        img.set(2, 1, [0.9, 0.8, 0.7]);
        let t = img.to_chw::<f32>();
        assert_eq!(Image::from_chw(&t).unwrap(), img);
    }
}
