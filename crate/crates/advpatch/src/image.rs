//! Image tensors and codec ingest.
//!
//! Pixels live in `[0, 1]` as `f64`, laid out H x W x 3 row-major. Integer
//! images are converted on ingest (`v / 255`); the whole attack pipeline is
//! differentiable and needs real values.

use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// An RGB image with pixel values in `[0, 1]`, shape `(H, W, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    /// Wrap a pixel array, validating shape and value range.
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h < 1 || w < 1 {
            return Err(Error::Dimension(format!(
                "image must be at least 1x1, got {h}x{w}"
            )));
        }
        if c != 3 {
            return Err(Error::Dimension(format!(
                "image must have 3 channels, got {c}"
            )));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(
                "image pixels must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, 3), value))
    }

    /// Build from a per-pixel function `(row, col, channel) -> value`,
    /// evaluated in row-major order.
    pub fn from_fn<F>(height: usize, width: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> f64,
    {
        Self::new(Array3::from_shape_fn((height, width, 3), |(r, c, ch)| {
            f(r, c, ch)
        }))
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    /// Consume and return the raw pixel array.
    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    /// Decode a PNG or JPEG file into an image tensor.
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        let mut pixels = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, p) in img.enumerate_pixels() {
            for ch in 0..3 {
                pixels[[y as usize, x as usize, ch]] = p.0[ch] as f64 / 255.0;
            }
        }
        Self::new(pixels)
    }

    /// Encode to PNG (8-bit, lossless apart from quantization).
    pub fn save_png<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let (h, w, _) = self.pixels.dim();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            for ch in 0..3 {
                let v = self.pixels[[y as usize, x as usize, ch]];
                p.0[ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        buf.save(path.as_ref())?;
        Ok(())
    }
}

/// An image paired with its integer class label and a stable identifier.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: usize,
    pub id: String,
}

impl LabeledImage {
    pub fn new(image: ImageTensor, label: usize, id: impl Into<String>) -> Self {
        Self {
            image,
            label,
            id: id.into(),
        }
    }
}

/// Convenience alias for a batch of labeled images.
pub type ImageBatch = Vec<LabeledImage>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        let mut a = Array3::zeros((2, 2, 3));
        a[[0, 0, 0]] = 1.5;
        assert!(matches!(ImageTensor::new(a), Err(Error::Parameter(_))));
    }

    #[test]
    fn rejects_bad_channel_count() {
        let a = Array3::<f64>::zeros((2, 2, 4));
        assert!(matches!(ImageTensor::new(a), Err(Error::Dimension(_))));
    }

    #[test]
    fn rejects_zero_sized() {
        let a = Array3::<f64>::zeros((0, 2, 3));
        assert!(matches!(ImageTensor::new(a), Err(Error::Dimension(_))));
    }

    #[test]
    fn png_roundtrip_is_exact_at_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = ImageTensor::from_fn(5, 7, |r, c, ch| {
            ((r * 31 + c * 7 + ch * 11) % 256) as f64 / 255.0
        })
        .unwrap();
        img.save_png(&path).unwrap();
        let back = ImageTensor::from_file(&path).unwrap();
        assert_eq!(img, back);
    }
}
