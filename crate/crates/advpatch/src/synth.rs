//! Synthetic desk-scale testbed: hash-derived class prototypes, an encoder
//! pair whose text tower embeds a label by encoding that label's prototype
//! image, and generators for datasets and videos built from those prototypes.
//!
//! With this pairing, clean prototype-plus-noise images classify correctly by
//! construction, which gives training and evaluation a meaningful toy target
//! without any pretrained weights.

use std::sync::Arc;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EncoderPair, TextEncoder, ToyImageEncoder};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabeledImage};
use crate::preprocess::{preprocess, PreprocessConfig};
use crate::util::{stable_hash64, subseed, subseed_n};
use crate::video::VideoSample;

/// Prototype patterns are an 8x8 block grid scaled to the requested side.
pub const PROTO_GRID: usize = 8;
/// Model-input side of the aligned toy backend.
pub const ALIGNED_SIDE: usize = 64;
/// Similarity temperature of the aligned toy backend.
pub const ALIGNED_TEMPERATURE: f64 = 16.0;

/// Label names used by the synthetic generators when callers ask for `n`
/// classes.
pub const DEFAULT_LABELS: [&str; 16] = [
    "cake",
    "homer-simpson",
    "unicorn",
    "rainbow",
    "saturn",
    "galaxy",
    "fireworks",
    "teapot",
    "zebra",
    "airplane",
    "butterfly",
    "grand-piano",
    "lighthouse",
    "sunflower",
    "t-shirt",
    "waterfall",
];

/// First `n` default labels as owned strings.
pub fn default_labels(n: usize) -> Result<Vec<String>> {
    if n < 2 || n > DEFAULT_LABELS.len() {
        return Err(Error::Parameter(format!(
            "class count must be in [2, {}], got {n}",
            DEFAULT_LABELS.len()
        )));
    }
    Ok(DEFAULT_LABELS[..n].iter().map(|s| s.to_string()).collect())
}

/// Deterministic block-pattern prototype for a label: values in [0.25, 0.75]
/// so noisy variants stay inside the pixel box.
pub fn prototype_grid(label: &str, seed: u64) -> Array3<f64> {
    Array3::from_shape_fn((PROTO_GRID, PROTO_GRID, 3), |(r, c, ch)| {
        let key = format!("{label}|{r}|{c}|{ch}");
        let h = stable_hash64(key.as_bytes(), subseed(seed, "prototype"));
        0.25 + 0.5 * (h as f64 / u64::MAX as f64)
    })
}

/// Nearest-neighbor upscale of a prototype grid to a square image.
pub fn render_prototype(grid: &Array3<f64>, side: usize) -> Result<ImageTensor> {
    let (gh, gw, _) = grid.dim();
    ImageTensor::from_fn(side, side, |r, c, ch| {
        grid[[r * gh / side, c * gw / side, ch]]
    })
}

/// Text tower that encodes a caption by rendering its prototype pattern and
/// pushing it through the shared image tower. Any string gets an embedding;
/// matching dataset prototypes classify correctly by construction.
struct PrototypeTextEncoder {
    image: Arc<ToyImageEncoder>,
    preprocess: PreprocessConfig,
    seed: u64,
}

impl TextEncoder for PrototypeTextEncoder {
    fn embed_dim(&self) -> usize {
        use crate::encoders::ImageEncoder;
        self.image.embed_dim()
    }

    fn embed(&self, text: &str) -> Result<ndarray::Array1<f64>> {
        use crate::encoders::ImageEncoder;
        let grid = prototype_grid(text, self.seed);
        let proto = render_prototype(&grid, self.image.side())?;
        let m = preprocess(&proto, &self.preprocess);
        self.image.embed(&m)
    }
}

/// The aligned toy backend: same differentiable image tower as the plain toy
/// encoder, with the prototype-rendering text tower.
pub fn make_aligned_encoder(dim: usize, seed: u64) -> Result<EncoderPair> {
    if dim < 2 {
        return Err(Error::Parameter(format!(
            "aligned encoder dim must be >= 2, got {dim}"
        )));
    }
    let cfg = PreprocessConfig::toy(ALIGNED_SIDE);
    let image = Arc::new(ToyImageEncoder::new(dim, seed, ALIGNED_SIDE));
    let text = Arc::new(PrototypeTextEncoder {
        image: image.clone(),
        preprocess: cfg.clone(),
        seed,
    });
    EncoderPair::from_parts(
        format!("toy-aligned-d{dim}-s{seed}"),
        ALIGNED_TEMPERATURE,
        None,
        image,
        text,
        cfg,
    )
}

/// Synthetic labeled images: per-class prototype plus uniform pixel noise,
/// clamped to the pixel box. `labels` order defines the label ids.
///
/// `proto_seed` selects the prototype patterns and must match the seed of the
/// aligned encoder the data is meant for; `noise_seed` varies the samples
/// (use different values for train and validation sets).
pub fn make_synthetic_dataset(
    labels: &[String],
    per_class: usize,
    side: usize,
    noise: f64,
    proto_seed: u64,
    noise_seed: u64,
) -> Result<Vec<LabeledImage>> {
    if labels.len() < 2 {
        return Err(Error::Parameter("need at least 2 classes".into()));
    }
    if per_class < 1 {
        return Err(Error::Parameter("per_class must be >= 1".into()));
    }
    if !(0.0..=0.5).contains(&noise) {
        return Err(Error::Parameter("noise must be in [0, 0.5]".into()));
    }
    let mut out = Vec::with_capacity(labels.len() * per_class);
    for (class, label) in labels.iter().enumerate() {
        let grid = prototype_grid(label, proto_seed);
        for i in 0..per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(subseed_n(
                noise_seed,
                "synth-image",
                (class * per_class + i) as u64,
            ));
            let pixels = Array3::from_shape_fn((side, side, 3), |(r, c, ch)| {
                let base = grid[[r * PROTO_GRID / side, c * PROTO_GRID / side, ch]];
                (base + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0)
            });
            let img = ImageTensor::new(pixels)?;
            out.push(LabeledImage::new(img, class, format!("{label}/synth_{i:04}")));
        }
    }
    Ok(out)
}

/// Synthetic videos: each video's frames are noisy renderings of one class
/// prototype; the caption names the class. Seeds split as in
/// [`make_synthetic_dataset`].
pub fn make_synthetic_videos(
    labels: &[String],
    per_label: usize,
    frames: usize,
    side: usize,
    noise: f64,
    proto_seed: u64,
    noise_seed: u64,
) -> Result<Vec<VideoSample>> {
    if labels.is_empty() || per_label < 1 || frames < 1 {
        return Err(Error::Parameter(
            "need at least one label, one video and one frame".into(),
        ));
    }
    if !(0.0..=0.5).contains(&noise) {
        return Err(Error::Parameter("noise must be in [0, 0.5]".into()));
    }
    let mut out = Vec::with_capacity(labels.len() * per_label);
    for (li, label) in labels.iter().enumerate() {
        let grid = prototype_grid(label, proto_seed);
        for v in 0..per_label {
            let mut frame_vec = Vec::with_capacity(frames);
            for f in 0..frames {
                let mut rng = ChaCha8Rng::seed_from_u64(subseed_n(
                    noise_seed,
                    "synth-video-frame",
                    ((li * per_label + v) * frames + f) as u64,
                ));
                let pixels = Array3::from_shape_fn((side, side, 3), |(r, c, ch)| {
                    let base = grid[[r * PROTO_GRID / side, c * PROTO_GRID / side, ch]];
                    (base + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0)
                });
                frame_vec.push(ImageTensor::new(pixels)?);
            }
            out.push(VideoSample::new(
                frame_vec,
                format!("a video of {label}"),
                format!("{label}_{v:03}"),
            )?);
        }
    }
    Ok(out)
}
