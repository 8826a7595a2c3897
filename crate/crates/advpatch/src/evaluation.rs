//! Attack-success metrics, the repeat-averaged evaluation protocol, and the
//! generative-model metric surface (perplexity, target occurrence).

use std::collections::BTreeMap;
use std::sync::Mutex;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{embed_texts, normalize_row, EncoderPair, LabelVocabulary};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, LabeledImage};
use crate::objectives::SimilarityMatrix;
use crate::patch::{apply_patch_seeded, PatchSpec};
use crate::preprocess::preprocess;
use crate::util::subseed_n;

/// One attacked-image prediction event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub original_label: String,
    pub target_label: String,
    /// Best-first predicted labels; unique, non-empty.
    pub topk_predictions: Vec<String>,
    pub repeat_index: usize,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.topk_predictions.is_empty() {
            return Err(Error::Parameter(
                "record must carry at least one prediction".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.topk_predictions {
            if !seen.insert(p) {
                return Err(Error::Parameter(format!(
                    "duplicate predicted label '{p}' in record"
                )));
            }
        }
        Ok(())
    }
}

/// Attack success rate at `k`.
///
/// The denominator counts only images whose original label differs from the
/// target. Repeats are averaged per image first, then across images.
pub fn asr(records: &[EvalRecord], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::Parameter("k must be >= 1".into()));
    }
    let target = match records.first() {
        Some(r) => r.target_label.clone(),
        None => {
            return Err(Error::UndefinedMetric(
                "no eligible records (empty record set)".into(),
            ))
        }
    };
    if records.iter().any(|r| r.target_label != target) {
        return Err(Error::Parameter(
            "all records must share one target label".into(),
        ));
    }
    let mut per_image: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records {
        if r.original_label == target {
            continue;
        }
        let hit = r.topk_predictions.iter().take(k).any(|p| *p == target);
        let entry = per_image.entry(&r.image_id).or_insert((0, 0));
        entry.0 += hit as usize;
        entry.1 += 1;
    }
    if per_image.is_empty() {
        return Err(Error::UndefinedMetric(
            "no eligible records (every original label equals the target)".into(),
        ));
    }
    let sum: f64 = per_image
        .values()
        .map(|&(hits, total)| hits as f64 / total as f64)
        .sum();
    Ok(sum / per_image.len() as f64)
}

/// Fraction of attacked records whose top-1 label differs from the clean
/// top-1 of the same image (per-image averaged). This is the universal
/// perturbation "majority deception" indicator, surfaced as a metric.
pub fn flip_rate(clean: &[EvalRecord], attacked: &[EvalRecord]) -> Result<f64> {
    let clean_top1: BTreeMap<&str, &str> = clean
        .iter()
        .map(|r| {
            (
                r.image_id.as_str(),
                r.topk_predictions.first().map(String::as_str).unwrap_or(""),
            )
        })
        .collect();
    let mut per_image: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in attacked {
        let Some(&base) = clean_top1.get(r.image_id.as_str()) else {
            continue;
        };
        let flipped = r.topk_predictions.first().map(String::as_str) != Some(base);
        let entry = per_image.entry(&r.image_id).or_insert((0, 0));
        entry.0 += flipped as usize;
        entry.1 += 1;
    }
    if per_image.is_empty() {
        return Err(Error::UndefinedMetric(
            "no overlapping image ids between clean and attacked records".into(),
        ));
    }
    let sum: f64 = per_image
        .values()
        .map(|&(f, t)| f as f64 / t as f64)
        .sum();
    Ok(sum / per_image.len() as f64)
}

/// Rank the vocabulary for one image: preprocess, embed, score against the
/// label embeddings, and return the best-first top-k label strings (ties
/// broken by vocabulary index).
pub fn rank_labels(
    image: &ImageTensor,
    enc: &EncoderPair,
    vocab: &LabelVocabulary,
    label_emb: ArrayView2<f64>,
    k: usize,
) -> Result<Vec<String>> {
    let m = preprocess(image, enc.preprocess_config());
    let v = enc.embed_image(&m)?;
    let u = normalize_row(v.view())?;
    let u2 = u.insert_axis(ndarray::Axis(0));
    let sim = SimilarityMatrix::new(u2.view(), label_emb, enc.temperature(), enc.bias())?;
    sim.top_k(0, k)
        .into_iter()
        .map(|j| vocab.label(j).map(str::to_string))
        .collect()
}

/// Aggregated result of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub target_label: String,
    pub n_images: usize,
    /// Images excluded from the denominator because their label is the target.
    pub n_excluded: usize,
    pub repeats: usize,
    pub asr: BTreeMap<usize, f64>,
    pub clean_asr: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub records: Vec<EvalRecord>,
    pub clean_records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

/// Evaluate a patch over a validation set: apply at a seeded random placement
/// `repeats` times per image, rank the vocabulary by similarity, and compute
/// ASR@k for each requested `k` plus the clean-image reference values.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_patch(
    val_set: &[LabeledImage],
    enc: &EncoderPair,
    vocab: &LabelVocabulary,
    patch: &PatchSpec,
    target: usize,
    repeats: usize,
    k_list: &[usize],
    seed: u64,
) -> Result<EvalOutcome> {
    if repeats < 1 {
        return Err(Error::Parameter("repeats must be >= 1".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Parameter("empty validation set".into()));
    }
    if k_list.is_empty() {
        return Err(Error::Parameter("k_list must be non-empty".into()));
    }
    let target_label = vocab.label(target)?.to_string();
    let label_emb = embed_texts(enc, vocab, true)?;
    let k_max = k_list.iter().copied().max().unwrap().min(vocab.len());

    let rank = |img: &ImageTensor| rank_labels(img, enc, vocab, label_emb.view(), k_max);

    let per_image: Vec<(Vec<EvalRecord>, EvalRecord)> = val_set
        .par_iter()
        .enumerate()
        .map(|(idx, li)| -> Result<(Vec<EvalRecord>, EvalRecord)> {
            let original = vocab.label(li.label)?.to_string();
            let clean = EvalRecord {
                image_id: li.id.clone(),
                original_label: original.clone(),
                target_label: target_label.clone(),
                topk_predictions: rank(&li.image)?,
                repeat_index: 0,
            };
            let mut adv = Vec::with_capacity(repeats);
            for r in 0..repeats {
                let s = subseed_n(seed, "placement", (idx * repeats + r) as u64);
                let attacked = apply_patch_seeded(&li.image, patch, s)?;
                adv.push(EvalRecord {
                    image_id: li.id.clone(),
                    original_label: original.clone(),
                    target_label: target_label.clone(),
                    topk_predictions: rank(&attacked)?,
                    repeat_index: r,
                });
            }
            Ok((adv, clean))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(val_set.len() * repeats);
    let mut clean_records = Vec::with_capacity(val_set.len());
    for (adv, clean) in per_image {
        records.extend(adv);
        clean_records.push(clean);
    }

    let mut asr_map = BTreeMap::new();
    let mut clean_map = BTreeMap::new();
    for &k in k_list {
        let kk = k.min(vocab.len());
        asr_map.insert(k, asr(&records, kk)?);
        clean_map.insert(k, asr(&clean_records, kk)?);
    }
    let n_excluded = val_set
        .iter()
        .filter(|li| li.label == target)
        .count();
    Ok(EvalOutcome {
        records,
        clean_records,
        summary: EvalSummary {
            target_label,
            n_images: val_set.len(),
            n_excluded,
            repeats,
            asr: asr_map,
            clean_asr: clean_map,
        },
    })
}

// ---------------------------------------------------------------------------
// Generative-model metrics
// ---------------------------------------------------------------------------

/// Output of a generative captioner for one (image, prompt) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeOutput {
    pub text: String,
    /// Log probability of each generated token; finite, `<= 0`.
    pub token_logprobs: Vec<f64>,
}

/// Minimal adapter contract for generative captioners (LLaVA-style models
/// attach here; the toolkit ships only a scripted fake for tests).
pub trait GenerativeModel: Send + Sync {
    fn generate(&self, image: &ImageTensor, prompt: &str) -> Result<GenerativeOutput>;
}

/// Deterministic fake generator cycling through canned outputs.
pub struct ScriptedGenerator {
    outputs: Vec<GenerativeOutput>,
    cursor: Mutex<usize>,
}

impl ScriptedGenerator {
    pub fn new(outputs: Vec<GenerativeOutput>) -> Result<Self> {
        if outputs.is_empty() {
            return Err(Error::Parameter(
                "scripted generator needs at least one output".into(),
            ));
        }
        Ok(Self {
            outputs,
            cursor: Mutex::new(0),
        })
    }
}

impl GenerativeModel for ScriptedGenerator {
    fn generate(&self, _image: &ImageTensor, _prompt: &str) -> Result<GenerativeOutput> {
        let mut cursor = self.cursor.lock().expect("generator cursor");
        let out = self.outputs[*cursor % self.outputs.len()].clone();
        *cursor += 1;
        Ok(out)
    }
}

/// Perplexity: the exponent of the mean negative token log-likelihood.
pub fn perplexity(out: &GenerativeOutput) -> Result<f64> {
    if out.token_logprobs.is_empty() {
        return Err(Error::Parameter(
            "perplexity needs at least one token log-probability".into(),
        ));
    }
    if !out
        .token_logprobs
        .iter()
        .all(|lp| lp.is_finite() && *lp <= 0.0)
    {
        return Err(Error::Parameter(
            "token log-probabilities must be finite and <= 0".into(),
        ));
    }
    let mean: f64 = out.token_logprobs.iter().sum::<f64>() / out.token_logprobs.len() as f64;
    Ok((-mean).exp())
}

fn normalize_for_match(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut last_space = false;
    for ch in s.chars() {
        let ch = match ch {
            '-' | '_' => ' ',
            c => c.to_ascii_lowercase(),
        };
        if ch == ' ' {
            if !last_space && !out.is_empty() {
                out.push(' ');
            }
            last_space = true;
        } else {
            out.push(ch);
            last_space = false;
        }
    }
    out.trim_end().to_string()
}

/// Case-insensitive containment of the target label in the response text,
/// with hyphens and underscores normalized to spaces in both strings.
pub fn target_occurrence(text: &str, target_label: &str) -> bool {
    let needle = normalize_for_match(target_label);
    if needle.is_empty() {
        return false;
    }
    normalize_for_match(text).contains(&needle)
}

/// Strict variant: the normalized label must appear as whole words, not as a
/// substring of a longer word ("cake" does not match "pancake").
pub fn target_occurrence_strict(text: &str, target_label: &str) -> bool {
    let needle = normalize_for_match(target_label);
    if needle.is_empty() {
        return false;
    }
    let hay = normalize_for_match(text);
    let bytes = hay.as_bytes();
    let mut start = 0;
    while let Some(pos) = hay[start..].find(&needle) {
        let begin = start + pos;
        let end = begin + needle.len();
        let left_ok = begin == 0 || !bytes[begin - 1].is_ascii_alphanumeric();
        let right_ok = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if left_ok && right_ok {
            return true;
        }
        start = begin + 1;
    }
    false
}
