//! Patch specifications and the application operators.
//!
//! A patch replaces pixels of the host image (no blending), always before
//! preprocessing. Region semantics are bit-exact: the placement coordinate is
//! the top-left corner, inclusive, row-major; pixels outside the replaced
//! region are bit-identical to the input.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::font;
use crate::image::ImageTensor;

/// Pixel value used for the light background of rendered text patches.
pub const TEXT_BACKGROUND: f64 = 0.95;
/// Pixel value used for dark glyph ink.
pub const TEXT_INK: f64 = 0.05;

/// Shape family of a patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PatchKind {
    /// Trainable rectangle pasted at a placement.
    Square,
    /// Trainable border ring of the given width; params form a full canvas
    /// and only the ring is ever applied.
    Frame { width: usize },
    /// Non-trainable rendered text covering `area_fraction` of the image.
    Text { text: String, area_fraction: f64 },
}

/// Provenance carried alongside patch parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatchMetadata {
    pub model_id: String,
    pub seed: u64,
    /// Stable hash of the training configuration; empty for untrained patches.
    pub train_config_hash: String,
    pub target_label: String,
}

/// A patch: kind, trainable parameters (possibly empty), target label and
/// provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub kind: PatchKind,
    /// `(H_p, W_p, 3)` values in `[0, 1]`. Empty `(0, 0, 3)` for text patches.
    pub params: Array3<f64>,
    pub target_label_id: usize,
    pub metadata: PatchMetadata,
}

fn check_params_range(params: &Array3<f64>) -> Result<()> {
    if !params.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
        return Err(Error::Parameter(
            "patch params must be finite and in [0, 1]".into(),
        ));
    }
    Ok(())
}

impl PatchSpec {
    /// A square patch from raw parameter pixels.
    pub fn square(
        params: Array3<f64>,
        target_label_id: usize,
        metadata: PatchMetadata,
    ) -> Result<Self> {
        let (h, w, c) = params.dim();
        if h < 1 || w < 1 || c != 3 {
            return Err(Error::Dimension(format!(
                "square patch params must be (H>=1, W>=1, 3), got ({h}, {w}, {c})"
            )));
        }
        check_params_range(&params)?;
        Ok(Self {
            kind: PatchKind::Square,
            params,
            target_label_id,
            metadata,
        })
    }

    /// A frame patch of ring width `width` over a full-size canvas.
    pub fn frame(
        width: usize,
        canvas: Array3<f64>,
        target_label_id: usize,
        metadata: PatchMetadata,
    ) -> Result<Self> {
        if width < 1 {
            return Err(Error::Parameter("frame width must be >= 1".into()));
        }
        let (h, w, c) = canvas.dim();
        if h < 1 || w < 1 || c != 3 {
            return Err(Error::Dimension(format!(
                "frame canvas must be (H>=1, W>=1, 3), got ({h}, {w}, {c})"
            )));
        }
        check_params_range(&canvas)?;
        Ok(Self {
            kind: PatchKind::Frame { width },
            params: canvas,
            target_label_id,
            metadata,
        })
    }

    /// A text patch; rendering happens at application time.
    pub fn text(
        text: impl Into<String>,
        area_fraction: f64,
        target_label_id: usize,
        metadata: PatchMetadata,
    ) -> Result<Self> {
        let text = text.into();
        if text.is_empty() {
            return Err(Error::Parameter("text patch requires non-empty text".into()));
        }
        if !(area_fraction > 0.0 && area_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "area_fraction must be in (0, 1), got {area_fraction}"
            )));
        }
        Ok(Self {
            kind: PatchKind::Text {
                text,
                area_fraction,
            },
            params: Array3::zeros((0, 0, 3)),
            target_label_id,
            metadata,
        })
    }

    /// Patch height/width for placement purposes (square patches only).
    pub fn dims(&self) -> (usize, usize) {
        let (h, w, _) = self.params.dim();
        (h, w)
    }
}

/// How a square patch is positioned on the host image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PlacementMode {
    /// Uniform over all fully-contained top-left corners.
    RandomUniform,
    /// Fixed top-left corner; must keep the patch inside the image.
    Fixed { row: usize, col: usize },
    /// Border overlay (frame patches).
    FrameOverlay,
    /// Centered text overlay (text patches).
    TextOverlay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    pub mode: PlacementMode,
    pub rng_seed: u64,
}

impl PlacementPolicy {
    pub fn random_uniform(rng_seed: u64) -> Self {
        Self {
            mode: PlacementMode::RandomUniform,
            rng_seed,
        }
    }

    pub fn fixed(row: usize, col: usize) -> Self {
        Self {
            mode: PlacementMode::Fixed { row, col },
            rng_seed: 0,
        }
    }
}

/// Draw a uniformly random fully-contained top-left corner.
pub(crate) fn sample_location<R: Rng>(
    rng: &mut R,
    img_h: usize,
    img_w: usize,
    patch_h: usize,
    patch_w: usize,
) -> (usize, usize) {
    let row = rng.gen_range(0..=img_h - patch_h);
    let col = rng.gen_range(0..=img_w - patch_w);
    (row, col)
}

/// Paste `params` into a copy of `pixels` at `(row, col)`. Caller has
/// validated containment.
pub(crate) fn paste_at(
    pixels: &Array3<f64>,
    params: &Array3<f64>,
    row: usize,
    col: usize,
) -> Array3<f64> {
    let mut out = pixels.clone();
    let (ph, pw, _) = params.dim();
    for i in 0..ph {
        for j in 0..pw {
            for ch in 0..3 {
                out[[row + i, col + j, ch]] = params[[i, j, ch]];
            }
        }
    }
    out
}

/// Resolve a placement to a concrete top-left corner for a square patch.
pub fn resolve_placement(
    image: &ImageTensor,
    patch: &PatchSpec,
    placement: &PlacementPolicy,
) -> Result<(usize, usize)> {
    let (ph, pw) = patch.dims();
    let (h, w) = (image.height(), image.width());
    if ph > h || pw > w {
        return Err(Error::Dimension(format!(
            "patch {ph}x{pw} larger than image {h}x{w}"
        )));
    }
    match placement.mode {
        PlacementMode::RandomUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(placement.rng_seed);
            Ok(sample_location(&mut rng, h, w, ph, pw))
        }
        PlacementMode::Fixed { row, col } => {
            if row + ph > h || col + pw > w {
                return Err(Error::Placement(format!(
                    "fixed corner ({row}, {col}) puts {ph}x{pw} patch outside {h}x{w} image"
                )));
            }
            Ok((row, col))
        }
        PlacementMode::FrameOverlay | PlacementMode::TextOverlay => Err(Error::Parameter(
            "overlay placement modes do not apply to square patches".into(),
        )),
    }
}

/// Apply a square patch: replace the rectangle at the resolved location with
/// the patch parameters. The input image is not mutated.
pub fn apply_patch(
    image: &ImageTensor,
    patch: &PatchSpec,
    placement: &PlacementPolicy,
) -> Result<ImageTensor> {
    if !matches!(patch.kind, PatchKind::Square) {
        return Err(Error::Parameter(
            "apply_patch expects a square patch; use apply_patch_spec for other kinds".into(),
        ));
    }
    let (row, col) = resolve_placement(image, patch, placement)?;
    ImageTensor::new(paste_at(image.pixels(), &patch.params, row, col))
}

/// Replace the border ring of width `W` with the frame canvas values.
/// When `2W >= min(H, W)` the whole image is covered.
pub fn render_frame_patch(image: &ImageTensor, patch: &PatchSpec) -> Result<ImageTensor> {
    let width = match patch.kind {
        PatchKind::Frame { width } => width,
        _ => {
            return Err(Error::Parameter(
                "render_frame_patch expects a frame patch".into(),
            ))
        }
    };
    let (h, w) = (image.height(), image.width());
    let (ch, cw, _) = patch.params.dim();
    if (ch, cw) != (h, w) {
        return Err(Error::Dimension(format!(
            "frame canvas {ch}x{cw} does not match image {h}x{w}"
        )));
    }
    let mut out = image.pixels().clone();
    for i in 0..h {
        for j in 0..w {
            let in_ring = i < width || j < width || i >= h - width || j >= w - width;
            if in_ring {
                for c in 0..3 {
                    out[[i, j, c]] = patch.params[[i, j, c]];
                }
            }
        }
    }
    ImageTensor::new(out)
}

/// Geometry of a rendered text patch on a given image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextLayout {
    /// Top-left corner of the replaced rectangle.
    pub row: usize,
    pub col: usize,
    /// Rectangle dimensions; `rows * cols` is within 1% of `a * H * W`.
    pub height: usize,
    pub width: usize,
    /// Integer glyph scale factor.
    pub scale: usize,
    /// Glyphs per rendered line.
    pub cols_per_line: usize,
}

/// Compute the deterministic layout for a text patch on an `h x w` image.
pub fn text_layout(text: &str, area_fraction: f64, h: usize, w: usize) -> Result<TextLayout> {
    let n = text.chars().count();
    if n == 0 {
        return Err(Error::Parameter("text patch requires non-empty text".into()));
    }
    if !(area_fraction > 0.0 && area_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "area_fraction must be in (0, 1), got {area_fraction}"
        )));
    }
    let target_area = area_fraction * (h * w) as f64;
    // Aspect-preserving rectangle: W_r = W * sqrt(a) keeps W_r*H_r == a*H*W.
    let rect_w = ((w as f64) * area_fraction.sqrt()).round().clamp(1.0, w as f64) as usize;
    let base_h = (target_area / rect_w as f64).round() as i64;
    let mut best: Option<(usize, f64)> = None;
    for dh in -1..=1i64 {
        let cand = (base_h + dh).clamp(1, h as i64) as usize;
        let err = ((rect_w * cand) as f64 - target_area).abs();
        if best.is_none_or(|(_, e)| err < e) {
            best = Some((cand, err));
        }
    }
    let (rect_h, err) = best.unwrap();
    if rect_w < font::GLYPH_W || rect_h < font::GLYPH_H {
        return Err(Error::Parameter(format!(
            "text region {rect_h}x{rect_w} is smaller than one glyph cell"
        )));
    }
    if err > 0.01 * target_area {
        return Err(Error::Parameter(format!(
            "cannot realize area fraction {area_fraction} within 1% on a {h}x{w} image"
        )));
    }
    // Largest integer glyph scale whose wrapped text still fits the rectangle.
    let mut chosen: Option<(usize, usize)> = None;
    for s in 1..=rect_h / font::GLYPH_H {
        let cols = rect_w / (font::GLYPH_W * s);
        if cols == 0 {
            break;
        }
        let lines = n.div_ceil(cols);
        if lines * font::GLYPH_H * s <= rect_h {
            chosen = Some((s, cols));
        }
    }
    let (scale, cols_per_line) = chosen.ok_or_else(|| {
        Error::Parameter(format!(
            "text region {rect_h}x{rect_w} is smaller than one glyph cell"
        ))
    })?;
    Ok(TextLayout {
        row: (h - rect_h) / 2,
        col: (w - rect_w) / 2,
        height: rect_h,
        width: rect_w,
        scale,
        cols_per_line,
    })
}

/// Render dark text on a light rectangle covering `area_fraction` of the
/// image (within 1%), centered. Bit-reproducible given (text, a, image size).
pub fn render_text_patch(image: &ImageTensor, patch: &PatchSpec) -> Result<ImageTensor> {
    let (text, area_fraction) = match &patch.kind {
        PatchKind::Text {
            text,
            area_fraction,
        } => (text.as_str(), *area_fraction),
        _ => {
            return Err(Error::Parameter(
                "render_text_patch expects a text patch".into(),
            ))
        }
    };
    let (h, w) = (image.height(), image.width());
    let layout = text_layout(text, area_fraction, h, w)?;
    let mut out = image.pixels().clone();
    for i in 0..layout.height {
        for j in 0..layout.width {
            for c in 0..3 {
                out[[layout.row + i, layout.col + j, c]] = TEXT_BACKGROUND;
            }
        }
    }
    let chars: Vec<char> = text.chars().collect();
    let lines = chars.len().div_ceil(layout.cols_per_line);
    let cols_used = chars.len().min(layout.cols_per_line);
    let grid_w = cols_used * font::GLYPH_W * layout.scale;
    let grid_h = lines * font::GLYPH_H * layout.scale;
    let grid_r0 = layout.row + (layout.height - grid_h) / 2;
    let grid_c0 = layout.col + (layout.width - grid_w) / 2;
    for (idx, &ch) in chars.iter().enumerate() {
        let line = idx / layout.cols_per_line;
        let slot = idx % layout.cols_per_line;
        let cell_r = grid_r0 + line * font::GLYPH_H * layout.scale;
        let cell_c = grid_c0 + slot * font::GLYPH_W * layout.scale;
        for fr in 0..font::GLYPH_H {
            for fc in 0..font::GLYPH_W {
                if font::ink(ch, fr, fc) {
                    for si in 0..layout.scale {
                        for sj in 0..layout.scale {
                            let r = cell_r + fr * layout.scale + si;
                            let c = cell_c + fc * layout.scale + sj;
                            for chn in 0..3 {
                                out[[r, c, chn]] = TEXT_INK;
                            }
                        }
                    }
                }
            }
        }
    }
    ImageTensor::new(out)
}

/// Apply any patch kind: squares at the given placement, frames and text as
/// overlays.
pub fn apply_patch_spec(
    image: &ImageTensor,
    patch: &PatchSpec,
    placement: &PlacementPolicy,
) -> Result<ImageTensor> {
    match &patch.kind {
        PatchKind::Square => apply_patch(image, patch, placement),
        PatchKind::Frame { .. } => render_frame_patch(image, patch),
        PatchKind::Text { .. } => render_text_patch(image, patch),
    }
}

/// Apply any patch kind with the square placement drawn from `seed`.
/// Frame and text patches ignore the seed (their placement is fixed).
pub fn apply_patch_seeded(image: &ImageTensor, patch: &PatchSpec, seed: u64) -> Result<ImageTensor> {
    match &patch.kind {
        PatchKind::Square => apply_patch(image, patch, &PlacementPolicy::random_uniform(seed)),
        PatchKind::Frame { .. } => render_frame_patch(image, patch),
        PatchKind::Text { .. } => render_text_patch(image, patch),
    }
}
