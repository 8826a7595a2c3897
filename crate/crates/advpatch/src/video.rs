//! Video attacks: keyframe extraction, partial frame infection, the four
//! CLIP-score variants, and attack-success curves over infection fractions.

use ndarray::ArrayView1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderPair;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::patch::{apply_patch_seeded, PatchSpec};
use crate::preprocess::preprocess;
use crate::util::{subseed, subseed_n};

/// Default number of keyframes extracted per video.
pub const DEFAULT_KEYFRAMES: usize = 10;

/// An ordered frame sequence with its caption.
#[derive(Debug, Clone)]
pub struct VideoSample {
    frames: Vec<ImageTensor>,
    pub caption: String,
    pub id: String,
}

impl VideoSample {
    pub fn new(
        frames: Vec<ImageTensor>,
        caption: impl Into<String>,
        id: impl Into<String>,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Parameter("video needs at least one frame".into()));
        }
        let dims = (frames[0].height(), frames[0].width());
        if frames
            .iter()
            .any(|f| (f.height(), f.width()) != dims)
        {
            return Err(Error::Dimension(
                "all video frames must share one size".into(),
            ));
        }
        Ok(Self {
            frames,
            caption: caption.into(),
            id: id.into(),
        })
    }

    pub fn frames(&self) -> &[ImageTensor] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Keyframes subsampled from a video, with their source indices.
#[derive(Debug, Clone)]
pub struct KeyframeSet {
    pub frames: Vec<ImageTensor>,
    pub source_indices: Vec<usize>,
}

impl KeyframeSet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Uniform temporal sampling: indices `floor(i * T / T')` for `i < T'`,
/// deduplicated. Videos with `T <= T'` contribute every frame.
pub fn extract_keyframes(video: &VideoSample, t_prime: usize) -> Result<KeyframeSet> {
    if t_prime < 1 {
        return Err(Error::Parameter("t_prime must be >= 1".into()));
    }
    let t = video.len();
    let mut indices: Vec<usize> = (0..t_prime).map(|i| i * t / t_prime).collect();
    indices.dedup();
    let frames = indices.iter().map(|&i| video.frames[i].clone()).collect();
    Ok(KeyframeSet {
        frames,
        source_indices: indices,
    })
}

/// How attacked frames are chosen within a keyframe set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSelection {
    /// Uniform sample without replacement under the seed.
    Random,
    /// The first `ceil(rho * T')` frames in order.
    Prefix,
}

/// Apply the patch to exactly `ceil(rho * T')` keyframes, chosen uniformly
/// without replacement under `seed`. Untouched frames are bit-identical.
pub fn infect_frames(
    keyframes: &KeyframeSet,
    patch: &PatchSpec,
    fraction: f64,
    seed: u64,
) -> Result<KeyframeSet> {
    infect_frames_with(keyframes, patch, fraction, seed, FrameSelection::Random)
}

/// [`infect_frames`] with an explicit frame-selection mode.
pub fn infect_frames_with(
    keyframes: &KeyframeSet,
    patch: &PatchSpec,
    fraction: f64,
    seed: u64,
    selection: FrameSelection,
) -> Result<KeyframeSet> {
    if !(0.0..=1.0).contains(&fraction) || fraction.is_nan() {
        return Err(Error::Parameter(format!(
            "infection fraction must be in [0, 1], got {fraction}"
        )));
    }
    let t = keyframes.len();
    let n_attack = ((fraction * t as f64).ceil() as usize).min(t);
    let chosen: std::collections::BTreeSet<usize> = match selection {
        FrameSelection::Random => {
            // Partial Fisher-Yates for a uniform sample without replacement.
            let mut pool: Vec<usize> = (0..t).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, "infect-frames"));
            for i in 0..n_attack {
                let j = rng.gen_range(i..t);
                pool.swap(i, j);
            }
            pool[..n_attack].iter().copied().collect()
        }
        FrameSelection::Prefix => (0..n_attack).collect(),
    };
    let mut frames = Vec::with_capacity(t);
    for (i, frame) in keyframes.frames.iter().enumerate() {
        if chosen.contains(&i) {
            frames.push(apply_patch_seeded(
                frame,
                patch,
                subseed_n(seed, "frame-placement", i as u64),
            )?);
        } else {
            frames.push(frame.clone());
        }
    }
    Ok(KeyframeSet {
        frames,
        source_indices: keyframes.source_indices.clone(),
    })
}

/// CLIP score between an image and a text embedding:
/// `100 * max(cosine, 0)`.
pub fn clip_score(img_emb: ArrayView1<f64>, txt_emb: ArrayView1<f64>) -> Result<f64> {
    let ni = img_emb.dot(&img_emb).sqrt();
    let nt = txt_emb.dot(&txt_emb).sqrt();
    if ni < 1e-12 || nt < 1e-12 {
        return Err(Error::Parameter(
            "clip score is undefined for zero vectors".into(),
        ));
    }
    let cos = img_emb.dot(&txt_emb) / (ni * nt);
    Ok(100.0 * cos.max(0.0))
}

/// The four frame/caption score averages.
///
/// `s1`: attacked frames x target caption, `s2`: clean frames x original
/// caption, `s3`: clean frames x target caption, `s4`: attacked frames x
/// original caption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipScoreQuad {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
    pub s4: f64,
}

/// Mean per-frame CLIP score of every frame in `frames` against one caption
/// embedding.
fn mean_score(
    frames: &[ImageTensor],
    caption_emb: ArrayView1<f64>,
    enc: &EncoderPair,
) -> Result<f64> {
    let cfg = enc.preprocess_config();
    let scores: Vec<f64> = frames
        .par_iter()
        .map(|f| -> Result<f64> {
            let m = preprocess(f, cfg);
            let e = enc.embed_image(&m)?;
            clip_score(e.view(), caption_emb)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Score the clean and attacked keyframe sets against the original and target
/// captions.
pub fn score_video(
    kf_clean: &KeyframeSet,
    kf_adv: &KeyframeSet,
    original_caption: &str,
    target_caption: &str,
    enc: &EncoderPair,
) -> Result<ClipScoreQuad> {
    if kf_clean.len() != kf_adv.len() {
        return Err(Error::Dimension(format!(
            "keyframe sets differ in length: {} vs {}",
            kf_clean.len(),
            kf_adv.len()
        )));
    }
    if kf_clean.is_empty() {
        return Err(Error::Parameter("empty keyframe set".into()));
    }
    let e_orig = enc.embed_text(original_caption)?;
    let e_target = enc.embed_text(target_caption)?;
    Ok(ClipScoreQuad {
        s1: mean_score(&kf_adv.frames, e_target.view(), enc)?,
        s2: mean_score(&kf_clean.frames, e_orig.view(), enc)?,
        s3: mean_score(&kf_clean.frames, e_target.view(), enc)?,
        s4: mean_score(&kf_adv.frames, e_orig.view(), enc)?,
    })
}

/// One point of the attack-success curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    /// Fraction of videos with `s1 > s4`.
    pub asr_1_4: f64,
    /// Fraction of videos with `s1 > s2`.
    pub asr_1_2: f64,
}

/// Success fractions over a set of score quads: (`s1 > s4`, `s1 > s2`).
pub fn asr_from_quads(quads: &[ClipScoreQuad]) -> Result<(f64, f64)> {
    if quads.is_empty() {
        return Err(Error::UndefinedMetric("no videos scored".into()));
    }
    let n = quads.len() as f64;
    let wins14 = quads.iter().filter(|q| q.s1 > q.s4).count() as f64;
    let wins12 = quads.iter().filter(|q| q.s1 > q.s2).count() as f64;
    Ok((wins14 / n, wins12 / n))
}

/// Attack-success curve over infection fractions. The target caption comes
/// from the patch metadata; keyframes are the default uniform sample.
pub fn video_asr(
    videos: &[VideoSample],
    patch: &PatchSpec,
    fractions: &[f64],
    enc: &EncoderPair,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    video_asr_with(videos, patch, fractions, enc, seed, DEFAULT_KEYFRAMES)
}

/// [`video_asr`] with an explicit keyframe count.
pub fn video_asr_with(
    videos: &[VideoSample],
    patch: &PatchSpec,
    fractions: &[f64],
    enc: &EncoderPair,
    seed: u64,
    t_prime: usize,
) -> Result<Vec<CurvePoint>> {
    video_asr_full(
        videos,
        patch,
        fractions,
        enc,
        seed,
        t_prime,
        FrameSelection::Random,
    )
}

/// [`video_asr`] with explicit keyframe count and frame-selection mode.
#[allow(clippy::too_many_arguments)]
pub fn video_asr_full(
    videos: &[VideoSample],
    patch: &PatchSpec,
    fractions: &[f64],
    enc: &EncoderPair,
    seed: u64,
    t_prime: usize,
    selection: FrameSelection,
) -> Result<Vec<CurvePoint>> {
    if videos.is_empty() {
        return Err(Error::Parameter("empty video set".into()));
    }
    if patch.metadata.target_label.is_empty() {
        return Err(Error::Parameter(
            "patch metadata lacks a target label for caption scoring".into(),
        ));
    }
    let keyframes: Vec<KeyframeSet> = videos
        .iter()
        .map(|v| extract_keyframes(v, t_prime))
        .collect::<Result<Vec<_>>>()?;
    let mut curve = Vec::with_capacity(fractions.len());
    for (fi, &fraction) in fractions.iter().enumerate() {
        let quads: Vec<ClipScoreQuad> = videos
            .iter()
            .zip(keyframes.iter())
            .enumerate()
            .map(|(vi, (video, kf))| -> Result<ClipScoreQuad> {
                let s = subseed_n(seed, "video", (fi * videos.len() + vi) as u64);
                let adv = infect_frames_with(kf, patch, fraction, s, selection)?;
                score_video(kf, &adv, &video.caption, &patch.metadata.target_label, enc)
            })
            .collect::<Result<Vec<_>>>()?;
        let (asr_1_4, asr_1_2) = asr_from_quads(&quads)?;
        curve.push(CurvePoint {
            fraction,
            asr_1_4,
            asr_1_2,
        });
    }
    Ok(curve)
}

/// Load videos from a directory of per-video frame folders plus a captions
/// manifest (`{"video-id": "caption"}`). Frames are PNG/JPEG files, ordered
/// by filename.
pub fn load_video_dir<P: AsRef<std::path::Path>, Q: AsRef<std::path::Path>>(
    root: P,
    captions_path: Q,
) -> Result<Vec<VideoSample>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Ingest(format!(
            "video root '{}' is not a directory",
            root.display()
        )));
    }
    let captions: std::collections::BTreeMap<String, String> =
        serde_json::from_str(&std::fs::read_to_string(captions_path.as_ref())?)?;
    let mut dirs: Vec<(String, std::path::PathBuf)> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(|n| (n.to_string(), e.path())))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Ingest(format!(
            "video root '{}' has no video directories",
            root.display()
        )));
    }
    let mut out = Vec::with_capacity(dirs.len());
    for (id, dir) in dirs {
        let caption = captions.get(&id).ok_or_else(|| {
            Error::Ingest(format!("captions manifest lacks an entry for video '{id}'"))
        })?;
        let mut frame_paths: Vec<std::path::PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && matches!(
                        p.extension()
                            .and_then(|e| e.to_str())
                            .map(|e| e.to_ascii_lowercase())
                            .as_deref(),
                        Some("png" | "jpg" | "jpeg")
                    )
            })
            .collect();
        frame_paths.sort();
        let frames = frame_paths
            .iter()
            .map(ImageTensor::from_file)
            .collect::<Result<Vec<_>>>()?;
        if frames.is_empty() {
            return Err(Error::Ingest(format!("video '{id}' has no frames")));
        }
        out.push(VideoSample::new(frames, caption.clone(), id)?);
    }
    Ok(out)
}
