//! Paired image/text encoders behind a uniform interface.
//!
//! Real pretrained backends attach through [`BackendRegistry`] adapters; the
//! toolkit itself ships only deterministic toy encoders so that training and
//! evaluation are testable end to end without model weights.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{ModelInput, PreprocessConfig};
use crate::util::{stable_hash64, subseed};

/// Differentiable image tower: model input -> d-dimensional embedding.
pub trait ImageEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;

    fn embed(&self, input: &ModelInput) -> Result<Array1<f64>>;

    /// Whether [`ImageEncoder::vjp`] is implemented.
    fn supports_gradient(&self) -> bool {
        false
    }

    /// Gradient of `cotangent . embed(input)` with respect to the model
    /// input, shape `(3, S, S)`.
    fn vjp(&self, _input: &ModelInput, _cotangent: ArrayView1<f64>) -> Result<ndarray::Array3<f64>> {
        Err(Error::Capability(
            "image encoder does not provide gradients".into(),
        ))
    }
}

/// Text tower: token sequence (a string here) -> d-dimensional embedding.
/// Labels are constants during patch training, so no gradient contract.
pub trait TextEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Array1<f64>>;
}

/// A matched image/text encoder pair sharing one embedding space, plus the
/// similarity temperature (and optional sigmoid bias) frozen at load time.
#[derive(Clone)]
pub struct EncoderPair {
    model_id: String,
    embed_dim: usize,
    temperature: f64,
    bias: Option<f64>,
    image: Arc<dyn ImageEncoder>,
    text: Arc<dyn TextEncoder>,
    preprocess: PreprocessConfig,
}

impl std::fmt::Debug for EncoderPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderPair")
            .field("model_id", &self.model_id)
            .field("embed_dim", &self.embed_dim)
            .field("temperature", &self.temperature)
            .field("bias", &self.bias)
            .finish()
    }
}

impl EncoderPair {
    pub fn from_parts(
        model_id: impl Into<String>,
        temperature: f64,
        bias: Option<f64>,
        image: Arc<dyn ImageEncoder>,
        text: Arc<dyn TextEncoder>,
        preprocess: PreprocessConfig,
    ) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        if image.embed_dim() != text.embed_dim() {
            return Err(Error::Dimension(format!(
                "image tower emits {} dims but text tower emits {}",
                image.embed_dim(),
                text.embed_dim()
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            embed_dim: image.embed_dim(),
            temperature,
            bias,
            image,
            text,
            preprocess,
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn bias(&self) -> Option<f64> {
        self.bias
    }

    pub fn preprocess_config(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    pub fn supports_gradient(&self) -> bool {
        self.image.supports_gradient()
    }

    /// Embed a single preprocessed image, validating the backend output.
    pub fn embed_image(&self, input: &ModelInput) -> Result<Array1<f64>> {
        let e = self.image.embed(input)?;
        if e.len() != self.embed_dim {
            return Err(Error::Backend(format!(
                "image tower returned {} dims, expected {}",
                e.len(),
                self.embed_dim
            )));
        }
        if !e.iter().all(|v| v.is_finite()) {
            return Err(Error::Backend("image embedding is not finite".into()));
        }
        Ok(e)
    }

    /// Embed a caption string, validating the backend output.
    pub fn embed_text(&self, text: &str) -> Result<Array1<f64>> {
        let e = self.text.embed(text)?;
        if e.len() != self.embed_dim {
            return Err(Error::Backend(format!(
                "text tower returned {} dims, expected {}",
                e.len(),
                self.embed_dim
            )));
        }
        if !e.iter().all(|v| v.is_finite()) {
            return Err(Error::Backend("text embedding is not finite".into()));
        }
        Ok(e)
    }

    /// VJP through the image tower; errors with a capability message when the
    /// backend is inference-only.
    pub fn image_vjp(
        &self,
        input: &ModelInput,
        cotangent: ArrayView1<f64>,
    ) -> Result<ndarray::Array3<f64>> {
        self.image.vjp(input, cotangent)
    }
}

/// Ordered class label set plus the prompt template used for text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    labels: Vec<String>,
    prompt_template: String,
}

impl LabelVocabulary {
    /// Default template: the raw label string.
    pub fn new(labels: Vec<String>) -> Result<Self> {
        Self::with_template(labels, "{}")
    }

    pub fn with_template(labels: Vec<String>, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if labels.len() < 2 {
            return Err(Error::Parameter(
                "vocabulary needs at least 2 labels".into(),
            ));
        }
        if labels.iter().any(|l| l.is_empty()) {
            return Err(Error::Parameter("labels must be non-empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &labels {
            if !seen.insert(l.clone()) {
                return Err(Error::Parameter(format!("duplicate label: {l}")));
            }
        }
        if !template.contains("{}") {
            return Err(Error::Parameter(
                "prompt template must contain one {} slot".into(),
            ));
        }
        Ok(Self {
            labels,
            prompt_template: template,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, idx: usize) -> Result<&str> {
        self.labels
            .get(idx)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Parameter(format!("label index {idx} out of range")))
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Fill the template slot with the label verbatim.
    pub fn prompt(&self, idx: usize) -> Result<String> {
        Ok(self.prompt_template.replacen("{}", self.label(idx)?, 1))
    }
}

/// L2-normalize a vector; errors on (near-)zero input.
pub fn normalize_row(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm < 1e-12 {
        return Err(Error::Backend("cannot normalize zero embedding".into()));
    }
    Ok(v.mapv(|x| x / norm))
}

/// VJP of row normalization: given pre-normalization `v` and the gradient
/// w.r.t. the unit vector, return the gradient w.r.t. `v`.
pub(crate) fn normalize_vjp(v: ArrayView1<f64>, g_unit: ArrayView1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    let u = v.mapv(|x| x / norm);
    let proj = u.dot(&g_unit);
    let mut g = g_unit.to_owned();
    g.zip_mut_with(&u, |gi, &ui| *gi -= proj * ui);
    g.mapv(|x| x / norm)
}

/// Embed a batch of preprocessed images; row `i` is input `i`.
pub fn embed_images(
    enc: &EncoderPair,
    batch: &[ModelInput],
    normalize: bool,
) -> Result<Array2<f64>> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty image batch".into()));
    }
    let mut out = Array2::zeros((batch.len(), enc.embed_dim()));
    for (i, input) in batch.iter().enumerate() {
        let e = enc.embed_image(input)?;
        let e = if normalize { normalize_row(e.view())? } else { e };
        out.row_mut(i).assign(&e);
    }
    Ok(out)
}

/// Embed every vocabulary label (through the prompt template), rows in
/// vocabulary order.
pub fn embed_texts(
    enc: &EncoderPair,
    vocab: &LabelVocabulary,
    normalize: bool,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((vocab.len(), enc.embed_dim()));
    for i in 0..vocab.len() {
        let e = enc.embed_text(&vocab.prompt(i)?)?;
        let e = if normalize { normalize_row(e.view())? } else { e };
        out.row_mut(i).assign(&e);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Toy encoders
// ---------------------------------------------------------------------------

/// tanh of a fixed seeded random linear map over the flattened model input.
pub struct ToyImageEncoder {
    weights: Array2<f64>,
    side: usize,
}

impl ToyImageEncoder {
    pub fn new(dim: usize, seed: u64, side: usize) -> Self {
        let n = 3 * side * side;
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "toy-image-weights"));
        let scale = 1.0 / (n as f64).sqrt();
        let weights = Array2::from_shape_fn((dim, n), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { weights, side }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    fn check_side(&self, input: &ModelInput) -> Result<()> {
        if input.side() != self.side {
            return Err(Error::Dimension(format!(
                "toy encoder expects side {}, got {}",
                self.side,
                input.side()
            )));
        }
        Ok(())
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn embed_dim(&self) -> usize {
        self.weights.dim().0
    }

    fn embed(&self, input: &ModelInput) -> Result<Array1<f64>> {
        self.check_side(input)?;
        let z = self.weights.dot(&input.flat());
        Ok(z.mapv(f64::tanh))
    }

    fn supports_gradient(&self) -> bool {
        true
    }

    fn vjp(&self, input: &ModelInput, cotangent: ArrayView1<f64>) -> Result<ndarray::Array3<f64>> {
        self.check_side(input)?;
        let z = self.weights.dot(&input.flat());
        // d tanh(z) = 1 - tanh(z)^2
        let scaled = Array1::from_iter(
            z.iter()
                .zip(cotangent.iter())
                .map(|(&zi, &ci)| ci * (1.0 - zi.tanh().powi(2))),
        );
        let flat_grad = self.weights.t().dot(&scaled);
        let side = self.side;
        Ok(ndarray::Array3::from_shape_vec(
            (3, side, side),
            flat_grad.to_vec(),
        )
        .expect("shape matches flattened length"))
    }
}

const TEXT_BUCKETS: usize = 64;

/// Seeded hash-bucket bag-of-characters pushed through a fixed linear map.
/// Intentionally non-differentiable: labels are constants during training.
pub struct ToyTextEncoder {
    weights: Array2<f64>,
    seed: u64,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "toy-text-weights"));
        let scale = 1.0 / (TEXT_BUCKETS as f64).sqrt();
        let weights = Array2::from_shape_fn((dim, TEXT_BUCKETS), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { weights, seed }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn embed_dim(&self) -> usize {
        self.weights.dim().0
    }

    fn embed(&self, text: &str) -> Result<Array1<f64>> {
        let mut counts = Array1::<f64>::zeros(TEXT_BUCKETS);
        let mut total = 0usize;
        for ch in text.chars() {
            let mut buf = [0u8; 4];
            let bucket =
                stable_hash64(ch.encode_utf8(&mut buf).as_bytes(), self.seed) as usize
                    % TEXT_BUCKETS;
            counts[bucket] += 1.0;
            total += 1;
        }
        if total > 0 {
            counts.mapv_inplace(|c| c / total as f64);
        }
        Ok(self.weights.dot(&counts))
    }
}

/// Default toy input side when none is specified.
pub const TOY_DEFAULT_SIDE: usize = 64;
/// Default toy similarity temperature.
pub const TOY_DEFAULT_TEMPERATURE: f64 = 20.0;

/// Deterministic differentiable toy pair for tests and desk-scale runs.
pub fn make_toy_encoder(dim: usize, seed: u64) -> Result<EncoderPair> {
    make_toy_encoder_with(dim, seed, TOY_DEFAULT_SIDE, TOY_DEFAULT_TEMPERATURE)
}

pub fn make_toy_encoder_with(
    dim: usize,
    seed: u64,
    side: usize,
    temperature: f64,
) -> Result<EncoderPair> {
    if dim < 2 {
        return Err(Error::Parameter(format!(
            "toy encoder dim must be >= 2, got {dim}"
        )));
    }
    let image = Arc::new(ToyImageEncoder::new(dim, seed, side));
    let text = Arc::new(ToyTextEncoder::new(dim, seed));
    EncoderPair::from_parts(
        format!("toy-d{dim}-s{seed}"),
        temperature,
        None,
        image,
        text,
        PreprocessConfig::toy(side),
    )
}

// ---------------------------------------------------------------------------
// Backend registry
// ---------------------------------------------------------------------------

/// Declared properties of an external backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub embed_dim: usize,
    pub preprocess: PreprocessConfig,
    /// Whether the backend can provide input gradients (training needs them;
    /// evaluation does not).
    pub gradients: bool,
}

type AdapterFactory = Box<dyn Fn() -> Result<EncoderPair> + Send + Sync>;

/// Registry mapping model ids to encoder pairs.
///
/// Builtin ids: `toy`, `toy-d<D>-s<SEED>`, `toy-aligned`,
/// `toy-aligned-d<D>-s<SEED>`. External ids come from a JSON config file and
/// need a registered adapter before they resolve.
pub struct BackendRegistry {
    external: BTreeMap<String, BackendDescriptor>,
    adapters: BTreeMap<String, AdapterFactory>,
    cache_dir: Option<PathBuf>,
}

/// Environment variable naming the backend cache directory.
pub const CACHE_DIR_ENV: &str = "ADVPATCH_CACHE_DIR";

fn parse_toy_id(id: &str) -> Option<(usize, u64, bool)> {
    let (aligned, rest) = if let Some(rest) = id.strip_prefix("toy-aligned") {
        (true, rest)
    } else {
        (false, id.strip_prefix("toy")?)
    };
    if rest.is_empty() {
        return Some((if aligned { 16 } else { 32 }, 0, aligned));
    }
    // "-d<D>-s<SEED>"
    let rest = rest.strip_prefix("-d")?;
    let (d, s) = rest.split_once("-s")?;
    Some((d.parse().ok()?, s.parse().ok()?, aligned))
}

impl BackendRegistry {
    pub fn with_builtins() -> Self {
        Self {
            external: BTreeMap::new(),
            adapters: BTreeMap::new(),
            cache_dir: std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from),
        }
    }

    pub fn cache_dir(&self) -> Option<&Path> {
        self.cache_dir.as_deref()
    }

    /// Load external backend declarations from a JSON config file
    /// (`{"model-id": {embed_dim, preprocess, gradients}}`). Returns how many
    /// entries were added.
    pub fn load_config<P: AsRef<Path>>(&mut self, path: P) -> Result<usize> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let map: BTreeMap<String, BackendDescriptor> = serde_json::from_str(&text)?;
        let n = map.len();
        self.external.extend(map);
        Ok(n)
    }

    /// Attach a constructor for an external backend id.
    pub fn register_adapter<F>(&mut self, id: impl Into<String>, factory: F)
    where
        F: Fn() -> Result<EncoderPair> + Send + Sync + 'static,
    {
        self.adapters.insert(id.into(), Box::new(factory));
    }

    /// Descriptor for a model id, synthesized for builtins.
    pub fn describe(&self, id: &str) -> Option<BackendDescriptor> {
        if let Some((dim, _seed, _aligned)) = parse_toy_id(id) {
            return Some(BackendDescriptor {
                embed_dim: dim,
                preprocess: PreprocessConfig::toy(TOY_DEFAULT_SIDE),
                gradients: true,
            });
        }
        self.external.get(id).cloned()
    }

    /// Construct the encoder pair for a model id.
    pub fn resolve(&self, id: &str) -> Result<EncoderPair> {
        if let Some(factory) = self.adapters.get(id) {
            return factory();
        }
        if let Some((dim, seed, aligned)) = parse_toy_id(id) {
            return if aligned {
                crate::synth::make_aligned_encoder(dim, seed)
            } else {
                make_toy_encoder(dim, seed)
            };
        }
        if self.external.contains_key(id) {
            return Err(Error::Capability(format!(
                "backend '{id}' is declared in config but no adapter is registered"
            )));
        }
        Err(Error::Capability(format!("unknown model backend '{id}'")))
    }
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
