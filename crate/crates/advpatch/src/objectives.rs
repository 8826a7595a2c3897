//! Loss functions over embedding similarities and the per-image baseline
//! attacks (FGSM / PGD).

use ndarray::{Array2, Array3, ArrayView2};

use crate::encoders::{normalize_row, normalize_vjp, EncoderPair};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::preprocess::{preprocess, preprocess_pixel_grad};

/// Scaled similarity logits between a batch of image embeddings and the
/// label embeddings: `S[i][j] = t * x_i . y_j` (minus the bias for the
/// sigmoid variant).
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    scores: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn new(
        img_emb: ArrayView2<f64>,
        txt_emb: ArrayView2<f64>,
        temperature: f64,
        bias: Option<f64>,
    ) -> Result<Self> {
        if img_emb.ncols() != txt_emb.ncols() {
            return Err(Error::Dimension(format!(
                "embedding widths differ: {} vs {}",
                img_emb.ncols(),
                txt_emb.ncols()
            )));
        }
        let mut scores = img_emb.dot(&txt_emb.t());
        let b = bias.unwrap_or(0.0);
        scores.mapv_inplace(|s| temperature * s - b);
        if !scores.iter().all(|v| v.is_finite()) {
            return Err(Error::Backend("similarity scores are not finite".into()));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Array2<f64> {
        &self.scores
    }

    /// Indices of the top-k columns for one row, ties broken by lower index.
    pub fn top_k(&self, row: usize, k: usize) -> Vec<usize> {
        let r = self.scores.row(row);
        let mut idx: Vec<usize> = (0..r.len()).collect();
        idx.sort_by(|&a, &b| {
            r[b].partial_cmp(&r[a])
                .expect("finite scores")
                .then(a.cmp(&b))
        });
        idx.truncate(k.min(r.len()));
        idx
    }
}

/// Log-sum-exp with the summation done in ascending order, so the result is
/// a function of the multiset of values only. That makes the contrastive
/// loss exactly invariant under batch permutations.
fn logsumexp_sorted(vals: &[f64]) -> f64 {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut terms: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    terms.sort_by(|a, b| a.partial_cmp(b).expect("finite terms"));
    max + terms.iter().sum::<f64>().ln()
}

/// Numerically stable `-log sigmoid(v) = softplus(-v)`.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_paired(x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<usize> {
    if x.nrows() == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!(
            "paired batches must match, got {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    Ok(x.nrows())
}

/// Symmetric InfoNCE over matched image/text rows: mean of the image->text
/// and text->image softmax cross-entropies, scaled by `-1/(2B)`.
pub fn clip_loss(x: ArrayView2<f64>, y: ArrayView2<f64>, temperature: f64) -> Result<f64> {
    let b = check_paired(&x, &y)?;
    let logits = {
        let mut l = x.dot(&y.t());
        l.mapv_inplace(|s| temperature * s);
        l
    };
    // Collect the per-row and per-column terms, then sum in sorted order so
    // the value depends only on the multiset of terms (exact permutation
    // invariance).
    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        let row: Vec<f64> = logits.row(i).to_vec();
        let col: Vec<f64> = logits.column(i).to_vec();
        terms.push(logits[[i, i]] - logsumexp_sorted(&row));
        terms.push(logits[[i, i]] - logsumexp_sorted(&col));
    }
    terms.sort_by(|a, b| a.partial_cmp(b).expect("finite terms"));
    let total: f64 = terms.iter().sum();
    Ok(-total / (2.0 * b as f64))
}

/// [`clip_loss`] plus its gradient with respect to the image rows `x`.
pub fn clip_loss_grad(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    let b = check_paired(&x, &y)?;
    let loss = clip_loss(x, y, temperature)?;
    let logits = {
        let mut l = x.dot(&y.t());
        l.mapv_inplace(|s| temperature * s);
        l
    };
    // Row and column softmaxes of the logit matrix.
    let mut p_row = Array2::zeros((b, b));
    let mut p_col = Array2::zeros((b, b));
    for i in 0..b {
        let lr = logsumexp_sorted(&logits.row(i).to_vec());
        let lc = logsumexp_sorted(&logits.column(i).to_vec());
        for j in 0..b {
            p_row[[i, j]] = (logits[[i, j]] - lr).exp();
            p_col[[j, i]] = (logits[[j, i]] - lc).exp();
        }
    }
    // dLoss/dlogits[a][b] = -(2*delta_ab - p_row[a][b] - p_col[a][b]) / (2B)
    let mut g_logits = Array2::zeros((b, b));
    for a in 0..b {
        for j in 0..b {
            let delta = if a == j { 2.0 } else { 0.0 };
            g_logits[[a, j]] = -(delta - p_row[[a, j]] - p_col[[a, j]]) / (2.0 * b as f64);
        }
    }
    let grad = g_logits.dot(&y.to_owned()).mapv(|v| v * temperature);
    Ok((loss, grad))
}

/// Labels for the standard pairing: `+1` on the diagonal, `-1` elsewhere.
pub fn standard_pair_labels(batch: usize) -> Array2<f64> {
    Array2::from_shape_fn((batch, batch), |(i, j)| if i == j { 1.0 } else { -1.0 })
}

/// Per-pair sigmoid contrastive loss:
/// `-(1/B) sum_ij log sigmoid(z_ij * (t * x_i . y_j - b))`.
pub fn siglip_loss(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    temperature: f64,
    bias: f64,
) -> Result<f64> {
    let b = check_paired(&x, &y)?;
    if labels.dim() != (b, b) {
        return Err(Error::Dimension(format!(
            "labels must be {b}x{b}, got {:?}",
            labels.dim()
        )));
    }
    if !labels.iter().all(|&z| z == 1.0 || z == -1.0) {
        return Err(Error::Parameter("labels must be +1 or -1".into()));
    }
    let sims = x.dot(&y.t());
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            let v = labels[[i, j]] * (temperature * sims[[i, j]] - bias);
            total += softplus(-v);
        }
    }
    Ok(total / b as f64)
}

/// [`siglip_loss`] plus its gradient with respect to `x`.
pub fn siglip_loss_grad(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    labels: ArrayView2<f64>,
    temperature: f64,
    bias: f64,
) -> Result<(f64, Array2<f64>)> {
    let loss = siglip_loss(x, y, labels, temperature, bias)?;
    let b = x.nrows();
    let sims = x.dot(&y.t());
    let mut grad = Array2::zeros(x.raw_dim());
    for i in 0..b {
        for j in 0..b {
            let z = labels[[i, j]];
            let v = z * (temperature * sims[[i, j]] - bias);
            // d softplus(-v)/d sim = -z * t * sigmoid(-v)
            let coeff = -z * temperature * sigmoid(-v) / b as f64;
            for d in 0..x.ncols() {
                grad[[i, d]] += coeff * y[[j, d]];
            }
        }
    }
    Ok((loss, grad))
}

/// Targeted classification loss for patch training: mean over the batch of
/// `-log softmax_target(t * x_i . y_j)` with the softmax running over the
/// full label vocabulary.
pub fn patch_loss(
    img_emb: ArrayView2<f64>,
    label_emb: ArrayView2<f64>,
    target: usize,
    temperature: f64,
) -> Result<f64> {
    Ok(patch_loss_grad(img_emb, label_emb, target, temperature)?.0)
}

/// [`patch_loss`] plus its gradient with respect to the image embeddings.
pub fn patch_loss_grad(
    img_emb: ArrayView2<f64>,
    label_emb: ArrayView2<f64>,
    target: usize,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    let b = img_emb.nrows();
    let n = label_emb.nrows();
    if b == 0 {
        return Err(Error::Parameter("empty batch".into()));
    }
    if img_emb.ncols() != label_emb.ncols() {
        return Err(Error::Dimension(format!(
            "embedding widths differ: {} vs {}",
            img_emb.ncols(),
            label_emb.ncols()
        )));
    }
    if target >= n {
        return Err(Error::Parameter(format!(
            "target index {target} out of range for {n} labels"
        )));
    }
    let mut logits = img_emb.dot(&label_emb.t());
    logits.mapv_inplace(|s| temperature * s);
    let mut loss = 0.0;
    let mut grad = Array2::zeros(img_emb.raw_dim());
    for i in 0..b {
        let row: Vec<f64> = logits.row(i).to_vec();
        let lse = logsumexp_sorted(&row);
        loss += lse - logits[[i, target]];
        for j in 0..n {
            let p = (logits[[i, j]] - lse).exp();
            let coeff = temperature * (p - if j == target { 1.0 } else { 0.0 }) / b as f64;
            for d in 0..img_emb.ncols() {
                grad[[i, d]] += coeff * label_emb[[j, d]];
            }
        }
    }
    Ok((loss / b as f64, grad))
}

/// L-infinity attack budget for the per-image baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackBudget {
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
}

impl AttackBudget {
    pub fn new(epsilon: f64, alpha: f64, steps: usize) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::Parameter("epsilon must be positive".into()));
        }
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::Parameter("alpha must be positive".into()));
        }
        if steps < 1 {
            return Err(Error::Parameter("steps must be >= 1".into()));
        }
        Ok(Self {
            epsilon,
            alpha,
            steps,
        })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Iterated signed-gradient attack with projection onto the epsilon-ball and
/// the pixel box after every step. `steps = 1` is FGSM. Untargeted runs
/// ascend the loss; `targeted` flips the step sign to descend toward the
/// attacker's objective.
pub fn pgd_attack<F>(
    image: &ImageTensor,
    loss_fn: F,
    budget: &AttackBudget,
    targeted: bool,
) -> Result<ImageTensor>
where
    F: FnMut(&ImageTensor) -> Result<(f64, Array3<f64>)>,
{
    pgd_attack_traced(image, loss_fn, budget, targeted, |_| {})
}

/// [`pgd_attack`] with a callback invoked on every projected iterate, used by
/// feasibility checks.
pub fn pgd_attack_traced<F, C>(
    image: &ImageTensor,
    mut loss_fn: F,
    budget: &AttackBudget,
    targeted: bool,
    mut on_iterate: C,
) -> Result<ImageTensor>
where
    F: FnMut(&ImageTensor) -> Result<(f64, Array3<f64>)>,
    C: FnMut(&Array3<f64>),
{
    let x0 = image.pixels().clone();
    let mut x = x0.clone();
    let direction = if targeted { -1.0 } else { 1.0 };
    for _ in 0..budget.steps {
        let current = ImageTensor::new(x.clone())?;
        let (_, grad) = loss_fn(&current)?;
        if grad.dim() != x.dim() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match image {:?}",
                grad.dim(),
                x.dim()
            )));
        }
        ndarray::Zip::from(&mut x).and(&grad).for_each(|xi, &g| {
            *xi += budget.alpha * direction * sign(g);
        });
        // Project: epsilon-ball around the original, then the pixel box.
        ndarray::Zip::from(&mut x).and(&x0).for_each(|xi, &o| {
            *xi = xi.clamp(o - budget.epsilon, o + budget.epsilon).clamp(0.0, 1.0);
        });
        on_iterate(&x);
    }
    ImageTensor::new(x)
}

/// Build a pixel-space loss closure for the targeted classification
/// objective, suitable for [`pgd_attack`]: chains preprocessing, the image
/// tower and [`patch_loss_grad`] back to raw pixels.
pub fn pixel_ce_loss_fn(
    enc: &EncoderPair,
    label_emb: Array2<f64>,
    target: usize,
) -> Result<impl FnMut(&ImageTensor) -> Result<(f64, Array3<f64>)> + '_> {
    if !enc.supports_gradient() {
        return Err(Error::Capability(format!(
            "backend '{}' cannot provide gradients for pixel attacks",
            enc.model_id()
        )));
    }
    if target >= label_emb.nrows() {
        return Err(Error::Parameter(format!(
            "target index {target} out of range for {} labels",
            label_emb.nrows()
        )));
    }
    let cfg = enc.preprocess_config().clone();
    Ok(move |img: &ImageTensor| {
        let m = preprocess(img, &cfg);
        let v = enc.embed_image(&m)?;
        let u = normalize_row(v.view())?;
        let u2 = u.clone().insert_axis(ndarray::Axis(0));
        let (loss, g_u2) =
            patch_loss_grad(u2.view(), label_emb.view(), target, enc.temperature())?;
        let g_u = g_u2.row(0).to_owned();
        let g_v = normalize_vjp(v.view(), g_u.view());
        let g_m = enc.image_vjp(&m, g_v.view())?;
        let g_pix = preprocess_pixel_grad(&cfg, img.height(), img.width(), &g_m);
        Ok((loss, g_pix))
    })
}
