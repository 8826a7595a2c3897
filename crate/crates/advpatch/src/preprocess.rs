//! Model-input preprocessing: resize, center crop, per-channel normalization.
//!
//! The whole stage is affine in the input pixels, so its vector-Jacobian
//! product depends only on the shapes involved, never on pixel values. That
//! keeps the backward pass (`preprocess_pixel_grad`) tape-free.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Interpolation kernel used for resizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
    Bicubic,
}

/// Preprocessing recipe for one encoder backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Side of the square model input.
    pub target_side: usize,
    pub interpolation: Interpolation,
    pub channel_means: [f64; 3],
    pub channel_stds: [f64; 3],
}

impl PreprocessConfig {
    pub fn new(
        target_side: usize,
        interpolation: Interpolation,
        channel_means: [f64; 3],
        channel_stds: [f64; 3],
    ) -> Result<Self> {
        if target_side < 1 {
            return Err(Error::Parameter("target_side must be >= 1".into()));
        }
        if channel_stds.iter().any(|&s| s <= 0.0) {
            return Err(Error::Parameter("channel stds must be positive".into()));
        }
        Ok(Self {
            target_side,
            interpolation,
            channel_means,
            channel_stds,
        })
    }

    /// The statistics published with the common pretrained contrastive encoders,
    /// at 224x224 bicubic.
    pub fn contrastive_default() -> Self {
        Self {
            target_side: 224,
            interpolation: Interpolation::Bicubic,
            channel_means: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            channel_stds: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }

    /// Simple symmetric normalization, used by the toy backends.
    pub fn toy(target_side: usize) -> Self {
        Self {
            target_side,
            interpolation: Interpolation::Bicubic,
            channel_means: [0.5; 3],
            channel_stds: [0.5; 3],
        }
    }
}

/// A preprocessed image ready for an image encoder: shape `(3, S, S)`,
/// channel-first, normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    data: Array3<f64>,
}

impl ModelInput {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 || h != w {
            return Err(Error::Dimension(format!(
                "model input must be (3, S, S), got ({c}, {h}, {w})"
            )));
        }
        Ok(Self { data })
    }

    pub fn side(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    /// Flattened view in C order (channel, row, col).
    pub fn flat(&self) -> Array1<f64> {
        Array1::from_iter(self.data.iter().copied())
    }
}

/// One-dimensional resampling plan: for every output index, the source taps
/// and their weights. Weights are normalized so constants stay constant.
struct AxisResampler {
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisResampler {
    fn new(in_len: usize, out_len: usize, method: Interpolation) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let clamp = |i: i64| -> usize { i.clamp(0, in_len as i64 - 1) as usize };
        let mut taps = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
            match method {
                Interpolation::Nearest => {
                    row.push((clamp((center + 0.5).floor() as i64), 1.0));
                }
                Interpolation::Bilinear => {
                    let i0 = center.floor();
                    let f = center - i0;
                    row.push((clamp(i0 as i64), 1.0 - f));
                    row.push((clamp(i0 as i64 + 1), f));
                }
                Interpolation::Bicubic => {
                    let i0 = center.floor() as i64;
                    for j in -1..=2 {
                        let w = catmull_rom(center - (i0 + j) as f64);
                        row.push((clamp(i0 + j), w));
                    }
                }
            }
            let total: f64 = row.iter().map(|(_, w)| w).sum();
            for (_, w) in row.iter_mut() {
                *w /= total;
            }
            taps.push(row);
        }
        Self { taps }
    }
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn catmull_rom(x: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Resize an `(H, W, C)` array to `(out_h, out_w, C)`.
pub fn resize_hwc(
    input: &Array3<f64>,
    out_h: usize,
    out_w: usize,
    method: Interpolation,
) -> Array3<f64> {
    let (in_h, in_w, ch) = input.dim();
    let rows = AxisResampler::new(in_h, out_h, method);
    let mut mid = Array3::<f64>::zeros((out_h, in_w, ch));
    for (oh, taps) in rows.taps.iter().enumerate() {
        for &(ih, w) in taps {
            for iw in 0..in_w {
                for c in 0..ch {
                    mid[[oh, iw, c]] += w * input[[ih, iw, c]];
                }
            }
        }
    }
    let cols = AxisResampler::new(in_w, out_w, method);
    let mut out = Array3::<f64>::zeros((out_h, out_w, ch));
    for (ow, taps) in cols.taps.iter().enumerate() {
        for &(iw, w) in taps {
            for oh in 0..out_h {
                for c in 0..ch {
                    out[[oh, ow, c]] += w * mid[[oh, iw, c]];
                }
            }
        }
    }
    out
}

/// Vector-Jacobian product of [`resize_hwc`]: scatter an `(out_h, out_w, C)`
/// cotangent back to `(in_h, in_w, C)`.
pub fn resize_hwc_vjp(
    grad_out: &Array3<f64>,
    in_h: usize,
    in_w: usize,
    method: Interpolation,
) -> Array3<f64> {
    let (out_h, out_w, ch) = grad_out.dim();
    let cols = AxisResampler::new(in_w, out_w, method);
    let mut mid = Array3::<f64>::zeros((out_h, in_w, ch));
    for (ow, taps) in cols.taps.iter().enumerate() {
        for &(iw, w) in taps {
            for oh in 0..out_h {
                for c in 0..ch {
                    mid[[oh, iw, c]] += w * grad_out[[oh, ow, c]];
                }
            }
        }
    }
    let rows = AxisResampler::new(in_h, out_h, method);
    let mut out = Array3::<f64>::zeros((in_h, in_w, ch));
    for (oh, taps) in rows.taps.iter().enumerate() {
        for &(ih, w) in taps {
            for iw in 0..in_w {
                for c in 0..ch {
                    out[[ih, iw, c]] += w * mid[[oh, iw, c]];
                }
            }
        }
    }
    out
}

/// Dimensions after resizing the shorter side to `s`, aspect preserved.
pub fn resized_dims(h: usize, w: usize, s: usize) -> (usize, usize) {
    if h <= w {
        let w2 = (w as f64 * s as f64 / h as f64).round() as usize;
        (s, w2.max(s))
    } else {
        let h2 = (h as f64 * s as f64 / w as f64).round() as usize;
        (h2.max(s), s)
    }
}

/// Resize shorter side to `S`, center-crop `S x S`, transpose to channel-first
/// and normalize per channel: `(v - mean) / std`.
pub fn preprocess(image: &ImageTensor, cfg: &PreprocessConfig) -> ModelInput {
    let s = cfg.target_side;
    let (h, w) = (image.height(), image.width());
    let (rh, rw) = resized_dims(h, w, s);
    let resized = if (rh, rw) == (h, w) {
        image.pixels().clone()
    } else {
        resize_hwc(image.pixels(), rh, rw, cfg.interpolation)
    };
    let r0 = (rh - s) / 2;
    let c0 = (rw - s) / 2;
    let mut data = Array3::zeros((3, s, s));
    for ch in 0..3 {
        let mean = cfg.channel_means[ch];
        let std = cfg.channel_stds[ch];
        for i in 0..s {
            for j in 0..s {
                data[[ch, i, j]] = (resized[[r0 + i, c0 + j, ch]] - mean) / std;
            }
        }
    }
    ModelInput { data }
}

/// Gradient of a scalar loss with respect to the raw `(in_h, in_w, 3)` pixels,
/// given its gradient `grad` with respect to the preprocessed `(3, S, S)` input.
pub fn preprocess_pixel_grad(
    cfg: &PreprocessConfig,
    in_h: usize,
    in_w: usize,
    grad: &Array3<f64>,
) -> Array3<f64> {
    let s = cfg.target_side;
    debug_assert_eq!(grad.dim(), (3, s, s));
    let (rh, rw) = resized_dims(in_h, in_w, s);
    let r0 = (rh - s) / 2;
    let c0 = (rw - s) / 2;
    let mut g_resized = Array3::zeros((rh, rw, 3));
    for ch in 0..3 {
        let std = cfg.channel_stds[ch];
        for i in 0..s {
            for j in 0..s {
                g_resized[[r0 + i, c0 + j, ch]] = grad[[ch, i, j]] / std;
            }
        }
    }
    if (rh, rw) == (in_h, in_w) {
        g_resized
    } else {
        resize_hwc_vjp(&g_resized, in_h, in_w, cfg.interpolation)
    }
}
