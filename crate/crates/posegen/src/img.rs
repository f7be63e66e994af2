//! Normalized image tensors and lossless raster I/O.
//!
//! All images in the pipeline are `[3, h, w]` tensors of `f64` in the fixed
//! range `[-1, 1]`. 8-bit RGB files map linearly onto that range.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// An RGB image in the normalized range `[-1, 1]`, stored `[3, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, _, _) = data.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image tensor must have 3 channels, got {c}")));
        }
        if data.iter().any(|v| !v.is_finite() || *v < -1.0 || *v > 1.0) {
            return Err(Error::Data("image values must be finite and in [-1, 1]".into()));
        }
        Ok(Self { data })
    }

    /// Solid-color image; channels given in `[-1, 1]`.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Array3::zeros((3, height, width));
        for (c, v) in rgb.iter().enumerate() {
            data.slice_mut(ndarray::s![c, .., ..]).fill(*v);
        }
        Self { data }
    }

    pub fn from_rgb8(width: u32, height: u32, pixels: &[u8]) -> Result<Self> {
        let (w, h) = (width as usize, height as usize);
        if pixels.len() != w * h * 3 {
            return Err(Error::Data(format!(
                "pixel buffer length {} does not match {w}x{h} RGB",
                pixels.len()
            )));
        }
        let mut data = Array3::zeros((3, h, w));
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = pixels[(y * w + x) * 3 + c] as f64;
                    data[[c, y, x]] = v / 255.0 * 2.0 - 1.0;
                }
            }
        }
        Ok(Self { data })
    }

    pub fn to_rgb8(&self) -> (u32, u32, Vec<u8>) {
        let (_, h, w) = self.data.dim();
        let mut out = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = (self.data[[c, y, x]] + 1.0) / 2.0 * 255.0;
                    out[(y * w + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        (w as u32, h as u32, out)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::DataFile { path: path.to_path_buf(), msg: e.to_string() })?
            .decode()?
            .to_rgb8();
        Self::from_rgb8(img.width(), img.height(), img.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h, pixels) = self.to_rgb8();
        let buf: image::RgbImage =
            image::ImageBuffer::from_raw(w, h, pixels).expect("buffer sized from image dims");
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// (height, width).
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        let (_, h, w) = self.data.dim();
        let mut out = Array3::zeros((3, h, w));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[c, y, x]] = self.data[[c, y, w - 1 - x]];
                }
            }
        }
        Self { data: out }
    }

    /// Clamp arbitrary network output back into a valid image.
    pub fn from_raw_clamped(data: Array3<f64>) -> Result<Self> {
        let (c, _, _) = data.dim();
        if c != 3 {
            return Err(Error::Shape(format!("image tensor must have 3 channels, got {c}")));
        }
        Ok(Self { data: data.mapv(|v| v.clamp(-1.0, 1.0)) })
    }

    /// Zero background according to a `[h, w]` binary mask.
    pub fn masked(&self, mask: &ndarray::Array2<f64>) -> Result<Self> {
        let (_, h, w) = self.data.dim();
        if mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "mask {:?} does not match image {h}x{w}",
                mask.dim()
            )));
        }
        let mut out = self.data.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[c, y, x]] *= mask[[y, x]];
                }
            }
        }
        Ok(Self { data: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip_is_exact() {
        let mut pixels = Vec::new();
        for i in 0..4 * 3 * 3 {
            pixels.push((i * 37 % 256) as u8);
        }
        let img = ImageTensor::from_rgb8(4, 3, &pixels).unwrap();
        let (w, h, back) = img.to_rgb8();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pixels);
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut pixels = Vec::new();
        for i in 0..6 * 5 * 3 {
            pixels.push((i * 11 % 256) as u8);
        }
        let img = ImageTensor::from_rgb8(6, 5, &pixels).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let mut pixels = Vec::new();
        for i in 0..8 * 8 * 3 {
            pixels.push((i * 53 % 256) as u8);
        }
        let img = ImageTensor::from_rgb8(8, 8, &pixels).unwrap();
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn rejects_out_of_range_values() {
        let mut a = Array3::zeros((3, 2, 2));
        a[[0, 0, 0]] = 1.5;
        assert!(ImageTensor::new(a).is_err());
    }
}
