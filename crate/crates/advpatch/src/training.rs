//! Universal-patch optimization: the training loop, the crop-resize
//! augmentation update, and the differentiable chain from patch pixels to
//! the targeted loss.

use std::time::Instant;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{embed_texts, normalize_row, normalize_vjp, EncoderPair, LabelVocabulary};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_patch;
use crate::image::{ImageTensor, LabeledImage};
use crate::objectives::patch_loss_grad;
use crate::patch::{paste_at, sample_location, PatchKind, PatchSpec};
use crate::preprocess::{
    preprocess, preprocess_pixel_grad, resize_hwc, resize_hwc_vjp, Interpolation,
};
use crate::util::{stable_hash64, subseed, subseed_n};

/// Training hyperparameters. Adam with default moment coefficients drives the
/// patch parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Strength of the crop-resize augmentation term.
    pub beta: f64,
    pub crop_enabled: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            learning_rate: 0.1,
            batch_size: 64,
            beta: 1.0,
            crop_enabled: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Parameter("beta must be >= 0".into()));
        }
        Ok(())
    }

    /// Stable hex hash of the configuration, recorded in patch metadata.
    pub fn stable_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", stable_hash64(json.as_bytes(), 0))
    }
}

/// Per-epoch summary recorded during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_asr1: f64,
    pub val_asr5: f64,
    pub wall_secs: f64,
}

/// Loss trajectory and per-epoch validation metrics; one loss entry per
/// optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochStats>,
}

/// Adam optimizer over a patch-shaped parameter array.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Array3<f64>,
    v: Array3<f64>,
    step: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, shape: (usize, usize, usize)) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: Array3::zeros(shape),
            v: Array3::zeros(shape),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut Array3<f64>, grad: &Array3<f64>) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        ndarray::Zip::from(params)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / b1t;
                let v_hat = *v / b2t;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            });
    }
}

fn clamp01(p: &mut Array3<f64>) {
    p.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

// ---------------------------------------------------------------------------
// Crop-resize augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct CropRect {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

/// Each crop side is uniform in [50%, 100%] of the patch side; the position
/// is uniform over valid offsets. Draw order is fixed: height, width, top,
/// left.
fn sample_crop_rect<R: Rng>(rng: &mut R, h: usize, w: usize) -> CropRect {
    let min_h = h.div_ceil(2);
    let min_w = w.div_ceil(2);
    let height = rng.gen_range(min_h..=h);
    let width = rng.gen_range(min_w..=w);
    let top = rng.gen_range(0..=h - height);
    let left = rng.gen_range(0..=w - width);
    CropRect {
        top,
        left,
        height,
        width,
    }
}

/// Record of one augmentation application, enough to push gradients back
/// through both occurrences of the patch in `p + beta * (R o RC)(p)`.
pub(crate) struct AugmentTape {
    rect: CropRect,
    beta: f64,
    /// Pre-clamp values of the augmented patch.
    preclamp: Array3<f64>,
}

impl AugmentTape {
    /// VJP through clamp, the identity path and the crop-resize path.
    /// The clamp passes gradient on the closed interval [0, 1] so that
    /// `beta = 0` reproduces the unaugmented update exactly.
    pub(crate) fn vjp(&self, g_eff: &Array3<f64>) -> Array3<f64> {
        let (h, w, _) = g_eff.dim();
        let mut g_q = g_eff.clone();
        ndarray::Zip::from(&mut g_q)
            .and(&self.preclamp)
            .for_each(|g, &q| {
                if !(0.0..=1.0).contains(&q) {
                    *g = 0.0;
                }
            });
        let mut g_p = g_q.clone();
        let g_resized = g_q.mapv(|v| v * self.beta);
        let g_crop = resize_hwc_vjp(&g_resized, self.rect.height, self.rect.width, AUGMENT_RESIZE);
        for i in 0..self.rect.height.min(h) {
            for j in 0..self.rect.width.min(w) {
                for c in 0..3 {
                    g_p[[self.rect.top + i, self.rect.left + j, c]] += g_crop[[i, j, c]];
                }
            }
        }
        g_p
    }
}

const AUGMENT_RESIZE: Interpolation = Interpolation::Bilinear;

pub(crate) fn augment_with_tape<R: Rng>(
    patch: &Array3<f64>,
    beta: f64,
    rng: &mut R,
) -> Result<(Array3<f64>, AugmentTape)> {
    let (h, w, _) = patch.dim();
    if h < 2 || w < 2 {
        return Err(Error::Parameter(format!(
            "crop-resize augmentation needs a patch of at least 2x2, got {h}x{w}"
        )));
    }
    if beta < 0.0 {
        return Err(Error::Parameter("beta must be >= 0".into()));
    }
    let rect = sample_crop_rect(rng, h, w);
    let crop = patch
        .slice(ndarray::s![
            rect.top..rect.top + rect.height,
            rect.left..rect.left + rect.width,
            ..
        ])
        .to_owned();
    let resized = resize_hwc(&crop, h, w, AUGMENT_RESIZE);
    let preclamp = patch + &resized.mapv(|v| v * beta);
    let mut out = preclamp.clone();
    clamp01(&mut out);
    Ok((
        out,
        AugmentTape {
            rect,
            beta,
            preclamp,
        },
    ))
}

/// One augmentation update `clamp(p + beta * (R o RC)(p))` with a crop whose
/// sides are at least half the patch sides, resized back to the patch shape.
pub fn crop_resize_augment<R: Rng>(
    patch: &Array3<f64>,
    beta: f64,
    rng: &mut R,
) -> Result<Array3<f64>> {
    Ok(augment_with_tape(patch, beta, rng)?.0)
}

// ---------------------------------------------------------------------------
// Differentiable chain: patch pixels -> targeted loss
// ---------------------------------------------------------------------------

/// Where the trainable pixels land on one host image.
#[derive(Debug, Clone, Copy)]
pub(crate) enum ApplyPlan {
    Square { row: usize, col: usize },
    Frame { width: usize },
}

fn apply_plan(pixels: &Array3<f64>, patch: &Array3<f64>, plan: &ApplyPlan) -> Array3<f64> {
    match *plan {
        ApplyPlan::Square { row, col } => paste_at(pixels, patch, row, col),
        ApplyPlan::Frame { width } => {
            let (h, w, _) = pixels.dim();
            let mut out = pixels.clone();
            for i in 0..h {
                for j in 0..w {
                    if i < width || j < width || i >= h - width || j >= w - width {
                        for c in 0..3 {
                            out[[i, j, c]] = patch[[i, j, c]];
                        }
                    }
                }
            }
            out
        }
    }
}

/// Scatter the pixel-space gradient of one image back onto the patch params.
fn accumulate_plan_grad(
    g_patch: &mut Array3<f64>,
    g_pixels: &Array3<f64>,
    plan: &ApplyPlan,
) {
    match *plan {
        ApplyPlan::Square { row, col } => {
            let (ph, pw, _) = g_patch.dim();
            for i in 0..ph {
                for j in 0..pw {
                    for c in 0..3 {
                        g_patch[[i, j, c]] += g_pixels[[row + i, col + j, c]];
                    }
                }
            }
        }
        ApplyPlan::Frame { width } => {
            let (h, w, _) = g_pixels.dim();
            for i in 0..h {
                for j in 0..w {
                    if i < width || j < width || i >= h - width || j >= w - width {
                        for c in 0..3 {
                            g_patch[[i, j, c]] += g_pixels[[i, j, c]];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn batch_loss_and_patch_grad(
    images: &[&ImageTensor],
    plans: &[ApplyPlan],
    patch: &Array3<f64>,
    enc: &EncoderPair,
    label_emb: ArrayView2<f64>,
    target: usize,
) -> Result<(f64, Array3<f64>)> {
    debug_assert_eq!(images.len(), plans.len());
    let cfg = enc.preprocess_config();
    // Forward per image: apply, preprocess, embed.
    let forwards: Vec<_> = images
        .par_iter()
        .zip(plans.par_iter())
        .map(|(img, plan)| -> Result<_> {
            let pixels = apply_plan(img.pixels(), patch, plan);
            let adv = ImageTensor::new(pixels)?;
            let m = preprocess(&adv, cfg);
            let v = enc.embed_image(&m)?;
            let u = normalize_row(v.view())?;
            Ok((adv, m, v, u))
        })
        .collect::<Result<Vec<_>>>()?;

    let dim = enc.embed_dim();
    let mut unit = Array2::zeros((images.len(), dim));
    for (i, (_, _, _, u)) in forwards.iter().enumerate() {
        unit.row_mut(i).assign(u);
    }
    let (loss, g_unit) = patch_loss_grad(unit.view(), label_emb, target, enc.temperature())?;

    // Backward per image: embedding -> model input -> raw pixels.
    let pixel_grads: Vec<Array3<f64>> = forwards
        .par_iter()
        .enumerate()
        .map(|(i, (adv, m, v, _))| -> Result<Array3<f64>> {
            let g_v = normalize_vjp(v.view(), g_unit.index_axis(Axis(0), i));
            let g_m = enc.image_vjp(m, g_v.view())?;
            Ok(preprocess_pixel_grad(cfg, adv.height(), adv.width(), &g_m))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut g_patch = Array3::zeros(patch.raw_dim());
    for (g_pixels, plan) in pixel_grads.iter().zip(plans.iter()) {
        accumulate_plan_grad(&mut g_patch, g_pixels, plan);
    }
    Ok((loss, g_patch))
}

/// Loss and patch-pixel gradient for a batch of square placements: the chain
/// apply -> preprocess -> embed -> targeted loss. Exposed for gradient
/// verification against finite differences.
pub fn square_patch_loss_grad(
    images: &[ImageTensor],
    placements: &[(usize, usize)],
    patch: &Array3<f64>,
    enc: &EncoderPair,
    label_emb: ArrayView2<f64>,
    target: usize,
) -> Result<(f64, Array3<f64>)> {
    if images.len() != placements.len() {
        return Err(Error::Dimension(
            "one placement per image is required".into(),
        ));
    }
    let refs: Vec<&ImageTensor> = images.iter().collect();
    let plans: Vec<ApplyPlan> = placements
        .iter()
        .map(|&(row, col)| ApplyPlan::Square { row, col })
        .collect();
    batch_loss_and_patch_grad(&refs, &plans, patch, enc, label_emb, target)
}

/// Forward-only twin of [`square_patch_loss_grad`], used by finite-difference
/// oracles.
pub fn square_patch_loss(
    images: &[ImageTensor],
    placements: &[(usize, usize)],
    patch: &Array3<f64>,
    enc: &EncoderPair,
    label_emb: ArrayView2<f64>,
    target: usize,
) -> Result<f64> {
    let cfg = enc.preprocess_config();
    let mut unit = Array2::zeros((images.len(), enc.embed_dim()));
    for (i, (img, &(row, col))) in images.iter().zip(placements.iter()).enumerate() {
        let adv = ImageTensor::new(paste_at(img.pixels(), patch, row, col))?;
        let m = preprocess(&adv, cfg);
        let v = enc.embed_image(&m)?;
        unit.row_mut(i).assign(&normalize_row(v.view())?);
    }
    crate::objectives::patch_loss(unit.view(), label_emb, target, enc.temperature())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn check_patch_fits(train_set: &[LabeledImage], patch: &PatchSpec) -> Result<()> {
    match patch.kind {
        PatchKind::Square => {
            let (ph, pw) = patch.dims();
            for img in train_set {
                if ph > img.image.height() || pw > img.image.width() {
                    return Err(Error::Dimension(format!(
                        "patch {ph}x{pw} does not fit image '{}' ({}x{})",
                        img.id,
                        img.image.height(),
                        img.image.width()
                    )));
                }
            }
        }
        PatchKind::Frame { .. } => {
            let (ch, cw) = patch.dims();
            for img in train_set {
                if (img.image.height(), img.image.width()) != (ch, cw) {
                    return Err(Error::Dimension(format!(
                        "frame canvas {ch}x{cw} does not match image '{}' ({}x{})",
                        img.id,
                        img.image.height(),
                        img.image.width()
                    )));
                }
            }
        }
        PatchKind::Text { .. } => {
            return Err(Error::Parameter(
                "text patches have no trainable parameters".into(),
            ))
        }
    }
    Ok(())
}

/// Optimize patch parameters against the targeted loss over the training set.
///
/// Per batch: optionally form the augmented patch `clamp(p + beta*(R o RC)(p))`
/// with a fresh crop, apply it at one random placement per image, push the
/// batch through preprocessing and the image tower, take an Adam step on the
/// raw parameters and clamp them back to `[0, 1]`. Fully reproducible given
/// `cfg.seed`. Per-epoch validation metrics come from `val_set` when given,
/// otherwise from the training set.
pub fn train_patch(
    train_set: &[LabeledImage],
    enc: &EncoderPair,
    vocab: &LabelVocabulary,
    target: usize,
    patch_init: &PatchSpec,
    cfg: &TrainConfig,
    val_set: Option<&[LabeledImage]>,
) -> Result<(PatchSpec, TrainHistory)> {
    train_patch_with_checkpoints(train_set, enc, vocab, target, patch_init, cfg, val_set, None)
}

/// [`train_patch`] that additionally writes a patch artifact checkpoint into
/// `checkpoint_dir` after every epoch (`epoch_000.pa`, `epoch_001.pa`, ...).
#[allow(clippy::too_many_arguments)]
pub fn train_patch_with_checkpoints(
    train_set: &[LabeledImage],
    enc: &EncoderPair,
    vocab: &LabelVocabulary,
    target: usize,
    patch_init: &PatchSpec,
    cfg: &TrainConfig,
    val_set: Option<&[LabeledImage]>,
    checkpoint_dir: Option<&std::path::Path>,
) -> Result<(PatchSpec, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Parameter("empty training set".into()));
    }
    if !enc.supports_gradient() {
        return Err(Error::Capability(format!(
            "backend '{}' cannot provide gradients for training",
            enc.model_id()
        )));
    }
    if target >= vocab.len() {
        return Err(Error::Parameter(format!(
            "target index {target} out of range for {} labels",
            vocab.len()
        )));
    }
    check_patch_fits(train_set, patch_init)?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let label_emb = embed_texts(enc, vocab, true)?;
    let mut params = patch_init.params.clone();
    let mut adam = Adam::new(cfg.learning_rate, params.dim());
    let mut history = TrainHistory::default();

    // Independent streams so that toggling augmentation does not perturb
    // shuffling or placement.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "shuffle"));
    let mut placement_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "placement"));
    let mut augment_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "augment"));

    let n = train_set.len();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let (effective, tape) = if cfg.crop_enabled {
                let (eff, tape) = augment_with_tape(&params, cfg.beta, &mut augment_rng)?;
                (eff, Some(tape))
            } else {
                (params.clone(), None)
            };

            let images: Vec<&ImageTensor> = chunk.iter().map(|&i| &train_set[i].image).collect();
            let plans: Vec<ApplyPlan> = match patch_init.kind {
                PatchKind::Square => {
                    let (ph, pw) = patch_init.dims();
                    images
                        .iter()
                        .map(|img| {
                            let (row, col) = sample_location(
                                &mut placement_rng,
                                img.height(),
                                img.width(),
                                ph,
                                pw,
                            );
                            ApplyPlan::Square { row, col }
                        })
                        .collect()
                }
                PatchKind::Frame { width } => {
                    images.iter().map(|_| ApplyPlan::Frame { width }).collect()
                }
                PatchKind::Text { .. } => unreachable!("rejected by check_patch_fits"),
            };

            let (loss, g_eff) = batch_loss_and_patch_grad(
                &images,
                &plans,
                &effective,
                enc,
                label_emb.view(),
                target,
            )?;
            let grad = match &tape {
                Some(tape) => tape.vjp(&g_eff),
                None => g_eff,
            };
            adam.step(&mut params, &grad);
            clamp01(&mut params);
            history.step_losses.push(loss);
            epoch_losses.push(loss);
        }

        let current = PatchSpec {
            kind: patch_init.kind.clone(),
            params: params.clone(),
            target_label_id: target,
            metadata: crate::patch::PatchMetadata {
                model_id: enc.model_id().to_string(),
                seed: cfg.seed,
                train_config_hash: cfg.stable_hash(),
                target_label: vocab.label(target)?.to_string(),
            },
        };
        if let Some(dir) = checkpoint_dir {
            let artifact = crate::artifact::PatchArtifact::new(
                current.clone(),
                Some(enc.preprocess_config().clone()),
                Some(cfg.clone()),
            );
            crate::artifact::save_patch(&artifact, dir.join(format!("epoch_{epoch:03}.pa")))?;
        }
        let eval_set = val_set.unwrap_or(train_set);
        let outcome = evaluate_patch(
            eval_set,
            enc,
            vocab,
            &current,
            target,
            1,
            &[1, 5],
            subseed_n(cfg.seed, "val-epoch", epoch as u64),
        )?;
        let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        let stats = EpochStats {
            epoch,
            mean_loss,
            val_asr1: outcome.summary.asr.get(&1).copied().unwrap_or(0.0),
            val_asr5: outcome.summary.asr.get(&5).copied().unwrap_or(0.0),
            wall_secs: start.elapsed().as_secs_f64(),
        };
        log::debug!(
            "epoch {}: mean loss {:.4}, val asr@1 {:.4}",
            epoch,
            stats.mean_loss,
            stats.val_asr1
        );
        history.epochs.push(stats);
    }

    let trained = PatchSpec {
        kind: patch_init.kind.clone(),
        params,
        target_label_id: target,
        metadata: crate::patch::PatchMetadata {
            model_id: enc.model_id().to_string(),
            seed: cfg.seed,
            train_config_hash: cfg.stable_hash(),
            target_label: vocab.label(target)?.to_string(),
        },
    };
    Ok((trained, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::make_toy_encoder_with;
    use crate::patch::PatchMetadata;

    fn tiny_setup(
        n_images: usize,
        img_side: usize,
        enc_side: usize,
    ) -> (Vec<LabeledImage>, EncoderPair, LabelVocabulary) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let images: Vec<LabeledImage> = (0..n_images)
            .map(|i| {
                let img = ImageTensor::from_fn(img_side, img_side, |_, _, _| {
                    0.2 + 0.6 * rng.gen::<f64>()
                })
                .unwrap();
                LabeledImage::new(img, i % 2, format!("img_{i}"))
            })
            .collect();
        let enc = make_toy_encoder_with(6, 3, enc_side, 8.0).unwrap();
        let vocab =
            LabelVocabulary::new(vec!["alpha".into(), "beta".into(), "gamma".into()]).unwrap();
        (images, enc, vocab)
    }

    fn square_init(side: usize) -> PatchSpec {
        PatchSpec::square(
            Array3::from_elem((side, side, 3), 0.5),
            2,
            PatchMetadata::default(),
        )
        .unwrap()
    }

    #[test]
    fn adam_with_zero_learning_rate_leaves_params_unchanged() {
        let mut p = Array3::from_elem((3, 3, 3), 0.4);
        let before = p.clone();
        let mut adam = Adam::new(0.0, p.dim());
        for _ in 0..5 {
            let g = Array3::from_elem(p.dim(), 1.7);
            adam.step(&mut p, &g);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn augment_beta_zero_is_identity() {
        let p = Array3::from_shape_fn((4, 5, 3), |(i, j, c)| ((i + j + c) % 7) as f64 / 7.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = crop_resize_augment(&p, 0.0, &mut rng).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn augment_of_constant_patch_is_constant() {
        // Pre-clamp value is (1 + beta) * c everywhere; c = 0.3, beta = 1.
        let p = Array3::from_elem((6, 6, 3), 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = crop_resize_augment(&p, 1.0, &mut rng).unwrap();
        for &v in out.iter() {
            assert!((v - 0.6).abs() < 1e-12);
        }
        // c = 0.6 saturates the clamp.
        let p = Array3::from_elem((6, 6, 3), 0.6);
        let out = crop_resize_augment(&p, 1.0, &mut rng).unwrap();
        for &v in out.iter() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn augment_is_deterministic_under_seeded_rng() {
        let p = Array3::from_shape_fn((8, 8, 3), |(i, j, c)| ((i * j + c) % 10) as f64 / 10.0);
        let a = crop_resize_augment(&p, 0.7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = crop_resize_augment(&p, 0.7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn augment_preserves_shape_and_rejects_degenerate_patches() {
        let p = Array3::from_elem((5, 9, 3), 0.2);
        let out = crop_resize_augment(&p, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.dim(), p.dim());
        let thin = Array3::from_elem((1, 9, 3), 0.2);
        assert!(matches!(
            crop_resize_augment(&thin, 1.0, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn augment_vjp_matches_finite_differences() {
        let p = Array3::from_shape_fn((5, 4, 3), |(i, j, c)| {
            0.15 + 0.05 * ((i * 13 + j * 5 + c) % 7) as f64
        });
        let beta = 0.8;
        let seed = 17;
        let (eff, tape) = augment_with_tape(&p, beta, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // Scalar function: weighted sum of the effective patch.
        let w = Array3::from_shape_fn(p.dim(), |(i, j, c)| ((i + 2 * j + c) % 5) as f64 - 2.0);
        let g_analytic = tape.vjp(&w);
        let f = |p: &Array3<f64>| -> f64 {
            let eff = crop_resize_augment(p, beta, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            eff.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
        };
        let _ = eff;
        let h = 1e-6;
        for i in 0..5 {
            for j in 0..4 {
                for c in 0..3 {
                    let mut pp = p.clone();
                    pp[[i, j, c]] += h;
                    let mut pm = p.clone();
                    pm[[i, j, c]] -= h;
                    let num = (f(&pp) - f(&pm)) / (2.0 * h);
                    let ana = g_analytic[[i, j, c]];
                    assert!(
                        (num - ana).abs() < 1e-6,
                        "({i},{j},{c}): {num} vs {ana}"
                    );
                }
            }
        }
    }

    #[test]
    fn one_step_on_a_frozen_batch_decreases_loss() {
        let (images, enc, vocab) = tiny_setup(4, 12, 10);
        let label_emb = embed_texts(&enc, &vocab, true).unwrap();
        let patch = Array3::from_elem((5, 5, 3), 0.5);
        let imgs: Vec<ImageTensor> = images.iter().map(|l| l.image.clone()).collect();
        let placements = vec![(2, 3), (0, 0), (4, 4), (1, 6)];
        let (before, grad) =
            square_patch_loss_grad(&imgs, &placements, &patch, &enc, label_emb.view(), 1).unwrap();
        let mut p = patch.clone();
        let mut adam = Adam::new(1e-3, p.dim());
        adam.step(&mut p, &grad);
        clamp01(&mut p);
        let after =
            square_patch_loss(&imgs, &placements, &p, &enc, label_emb.view(), 1).unwrap();
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn beta_zero_with_crop_enabled_matches_disabled_run() {
        let (images, enc, vocab) = tiny_setup(6, 12, 10);
        let init = square_init(5);
        let cfg_off = TrainConfig {
            epochs: 2,
            learning_rate: 0.05,
            batch_size: 3,
            beta: 0.0,
            crop_enabled: false,
            seed: 11,
        };
        let cfg_on = TrainConfig {
            crop_enabled: true,
            ..cfg_off.clone()
        };
        let (pa, ha) = train_patch(&images, &enc, &vocab, 2, &init, &cfg_off, None).unwrap();
        let (pb, hb) = train_patch(&images, &enc, &vocab, 2, &init, &cfg_on, None).unwrap();
        assert_eq!(pa.params, pb.params);
        assert_eq!(ha.step_losses, hb.step_losses);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (images, enc, vocab) = tiny_setup(5, 12, 10);
        let init = square_init(4);
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.05,
            batch_size: 2,
            beta: 1.0,
            crop_enabled: true,
            seed: 99,
        };
        let (pa, ha) = train_patch(&images, &enc, &vocab, 0, &init, &cfg, None).unwrap();
        let (pb, hb) = train_patch(&images, &enc, &vocab, 0, &init, &cfg, None).unwrap();
        assert_eq!(pa.params, pb.params);
        assert_eq!(ha.step_losses, hb.step_losses);
    }

    #[test]
    fn loss_trends_down_and_params_stay_clamped() {
        let (images, enc, vocab) = tiny_setup(10, 14, 10);
        let init = square_init(8);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 5,
            beta: 0.0,
            crop_enabled: false,
            seed: 5,
        };
        let (trained, history) = train_patch(&images, &enc, &vocab, 1, &init, &cfg, None).unwrap();
        assert!(trained.params.iter().all(|v| (0.0..=1.0).contains(v)));
        let first = history.epochs.first().unwrap().mean_loss;
        let last = history.epochs.last().unwrap().mean_loss;
        assert!(last < first, "mean loss {first} -> {last}");
        assert_eq!(
            history.step_losses.len(),
            cfg.epochs * images.len().div_ceil(cfg.batch_size)
        );
        assert_eq!(trained.metadata.model_id, enc.model_id());
        assert!(!trained.metadata.train_config_hash.is_empty());
    }

    #[test]
    fn text_patch_and_gradient_free_backend_are_rejected() {
        let (images, enc, vocab) = tiny_setup(3, 12, 10);
        let text = PatchSpec::text("cake", 0.4, 0, PatchMetadata::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_patch(&images, &enc, &vocab, 0, &text, &cfg, None),
            Err(Error::Parameter(_))
        ));

        struct NoGrad;
        impl crate::encoders::ImageEncoder for NoGrad {
            fn embed_dim(&self) -> usize {
                4
            }
            fn embed(&self, _m: &crate::preprocess::ModelInput) -> Result<ndarray::Array1<f64>> {
                Ok(ndarray::Array1::ones(4))
            }
        }
        struct FlatText;
        impl crate::encoders::TextEncoder for FlatText {
            fn embed_dim(&self) -> usize {
                4
            }
            fn embed(&self, _t: &str) -> Result<ndarray::Array1<f64>> {
                Ok(ndarray::arr1(&[1.0, 0.0, 0.0, 0.0]))
            }
        }
        let pair = EncoderPair::from_parts(
            "nograd",
            1.0,
            None,
            std::sync::Arc::new(NoGrad),
            std::sync::Arc::new(FlatText),
            crate::preprocess::PreprocessConfig::toy(10),
        )
        .unwrap();
        assert!(matches!(
            train_patch(&images, &pair, &vocab, 0, &square_init(4), &cfg, None),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn frame_patch_training_touches_only_the_ring() {
        let (images, enc, vocab) = tiny_setup(6, 12, 10);
        let canvas = Array3::from_elem((12, 12, 3), 0.5);
        let init = PatchSpec::frame(2, canvas.clone(), 1, PatchMetadata::default()).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.05,
            batch_size: 3,
            beta: 0.0,
            crop_enabled: false,
            seed: 8,
        };
        let (trained, history) = train_patch(&images, &enc, &vocab, 1, &init, &cfg, None).unwrap();
        assert!(!history.step_losses.is_empty());
        assert!(trained.params.iter().all(|v| (0.0..=1.0).contains(v)));
        // Gradients land on the ring only; interior canvas pixels never move.
        let mut ring_changed = 0;
        for i in 0..12 {
            for j in 0..12 {
                let in_ring = i < 2 || j < 2 || i >= 10 || j >= 10;
                for c in 0..3 {
                    let moved = trained.params[[i, j, c]] != canvas[[i, j, c]];
                    if in_ring {
                        ring_changed += moved as usize;
                    } else {
                        assert!(!moved, "interior pixel ({i},{j},{c}) moved");
                    }
                }
            }
        }
        assert!(ring_changed > 0, "ring parameters never moved");
    }

    #[test]
    fn checkpoints_are_written_per_epoch_and_load_back() {
        let (images, enc, vocab) = tiny_setup(4, 12, 10);
        let init = square_init(4);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.05,
            batch_size: 2,
            beta: 0.0,
            crop_enabled: false,
            seed: 21,
        };
        let dir = tempfile::tempdir().unwrap();
        let (trained, _) = train_patch_with_checkpoints(
            &images,
            &enc,
            &vocab,
            1,
            &init,
            &cfg,
            None,
            Some(dir.path()),
        )
        .unwrap();
        for epoch in 0..3 {
            let path = dir.path().join(format!("epoch_{epoch:03}.pa"));
            assert!(path.is_file(), "missing checkpoint {path:?}");
            let art = crate::artifact::load_patch(&path).unwrap();
            assert_eq!(art.spec.metadata.model_id, enc.model_id());
        }
        // The last checkpoint holds the final parameters.
        let last = crate::artifact::load_patch(dir.path().join("epoch_002.pa")).unwrap();
        assert_eq!(last.spec.params, trained.params);
    }

    #[test]
    fn empty_train_set_is_rejected() {
        let (_, enc, vocab) = tiny_setup(1, 12, 10);
        let err = train_patch(
            &[],
            &enc,
            &vocab,
            0,
            &square_init(4),
            &TrainConfig::default(),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }
}
