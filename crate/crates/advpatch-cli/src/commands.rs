//! Command implementations behind the argument surface in `lib.rs`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use advpatch::artifact::{load_patch, save_patch, PatchArtifact};
use advpatch::dataset::{load_image_dataset, write_image_tree, Split};
use advpatch::encoders::{embed_texts, BackendRegistry, LabelVocabulary};
use advpatch::evaluation::{asr, evaluate_patch, flip_rate, rank_labels, EvalRecord};
use advpatch::objectives::{pgd_attack, pixel_ce_loss_fn, AttackBudget};
use advpatch::patch::{PatchMetadata, PatchSpec};
use advpatch::preprocess::resize_hwc;
use advpatch::report::{
    read_records_jsonl, report_curve, report_history, report_records, write_records_jsonl,
};
use advpatch::synth::{
    default_labels, make_synthetic_dataset, make_synthetic_videos,
};
use advpatch::training::{train_patch_with_checkpoints, TrainConfig, TrainHistory};
use advpatch::video::{load_video_dir, video_asr_full, FrameSelection};
use advpatch::{subseed, ImageTensor, LabeledImage};
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;

use crate::{
    EvalArgs, EvalConfigFile, FrameSelectionArg, PgdArgs, PgdConfigFile, ReportArgs,
    ReportConfigFile, ShapeArg, SplitArg, SynthArgs, SynthConfig, TrainArgs, TrainConfigFile,
    VideoArgs, VideoConfigFile,
};

/// CLI-level error carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    /// Missing or inconsistent arguments (exit 2).
    Usage(String),
    /// Backend cannot do what was asked (exit 3).
    Capability(String),
    /// Everything else (exit 1).
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Capability(m) | CliError::Runtime(m) => {
                write!(f, "{m}")
            }
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Capability(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<advpatch::Error> for CliError {
    fn from(e: advpatch::Error) -> Self {
        match e {
            advpatch::Error::Capability(m) => CliError::Capability(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn load_config_file<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config '{}': {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("bad config '{}': {e}", p.display())))
        }
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required --{flag} (flag or config)")))
}

fn parse_usize_list(s: &str, flag: &str) -> Result<Vec<usize>, CliError> {
    let out: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    let out = out.map_err(|_| CliError::Usage(format!("--{flag} expects comma-separated integers, got '{s}'")))?;
    if out.is_empty() {
        return Err(CliError::Usage(format!("--{flag} must not be empty")));
    }
    Ok(out)
}

fn parse_f64_list(s: &str, flag: &str) -> Result<Vec<f64>, CliError> {
    let out: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
    let out = out.map_err(|_| CliError::Usage(format!("--{flag} expects comma-separated numbers, got '{s}'")))?;
    if out.is_empty() {
        return Err(CliError::Usage(format!("--{flag} must not be empty")));
    }
    Ok(out)
}

fn registry(backends: &Option<PathBuf>) -> Result<BackendRegistry, CliError> {
    let mut reg = BackendRegistry::with_builtins();
    if let Some(path) = backends {
        reg.load_config(path)?;
    } else if let Some(cache) = reg.cache_dir() {
        let default = cache.join("backends.json");
        if default.is_file() {
            reg.load_config(&default)?;
        }
    }
    Ok(reg)
}

/// Bicubic-resize an ingested image to a square side, clamping overshoot.
fn resize_image(img: &ImageTensor, side: usize) -> Result<ImageTensor, CliError> {
    let resized = resize_hwc(
        img.pixels(),
        side,
        side,
        advpatch::Interpolation::Bicubic,
    )
    .mapv(|v| v.clamp(0.0, 1.0));
    Ok(ImageTensor::new(resized)?)
}

fn maybe_resize(
    images: Vec<LabeledImage>,
    side: Option<usize>,
) -> Result<Vec<LabeledImage>, CliError> {
    match side {
        None => Ok(images),
        Some(side) => images
            .into_iter()
            .map(|li| {
                Ok(LabeledImage::new(
                    resize_image(&li.image, side)?,
                    li.label,
                    li.id,
                ))
            })
            .collect(),
    }
}

fn build_vocab(
    manifest: &advpatch::dataset::DatasetManifest,
    template: Option<String>,
) -> Result<LabelVocabulary, CliError> {
    Ok(match template {
        Some(t) => LabelVocabulary::with_template(manifest.classes.clone(), t)?,
        None => manifest.vocabulary()?,
    })
}

fn target_index(vocab: &LabelVocabulary, label: &str) -> Result<usize, CliError> {
    vocab.index_of(label).ok_or_else(|| {
        CliError::Runtime(format!(
            "target label '{label}' is not in the dataset vocabulary ({})",
            vocab.labels().join(", ")
        ))
    })
}

fn load_split_images(
    manifest: &advpatch::dataset::DatasetManifest,
    split: SplitArg,
) -> Result<Vec<LabeledImage>, CliError> {
    let images = match split {
        SplitArg::Train => manifest.load_split(Split::Train)?,
        SplitArg::Val => manifest.load_split(Split::Val)?,
        SplitArg::All => {
            let mut all = manifest.load_split(Split::Train)?;
            all.extend(manifest.load_split(Split::Val)?);
            all
        }
    };
    if images.is_empty() {
        return Err(CliError::Runtime(
            "selected split contains no images".into(),
        ));
    }
    Ok(images)
}

fn write_summary_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("summary serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write '{}': {e}", path.display())))?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn run_synth(args: SynthArgs) -> CliResult {
    let cfg: SynthConfig = load_config_file(&args.config)?;
    let out = require(args.out.or(cfg.out), "out")?;
    let per_class = args.per_class.or(cfg.per_class).unwrap_or(20);
    let side = args.side.or(cfg.side).unwrap_or(96);
    let noise = args.noise.or(cfg.noise).unwrap_or(0.15);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let videos = args.videos.or(cfg.videos).unwrap_or(0);
    let video_frames = args.video_frames.or(cfg.video_frames).unwrap_or(30);

    let labels: Vec<String> = match args.labels.or(cfg.labels) {
        Some(s) => s.split(',').map(|l| l.trim().to_string()).collect(),
        None => default_labels(args.classes.or(cfg.classes).unwrap_or(10))?,
    };
    let images = make_synthetic_dataset(&labels, per_class, side, noise, seed, subseed(seed, "synth-noise"))?;
    write_image_tree(&out, &labels, &images)?;
    println!(
        "wrote {} images over {} classes to {}",
        images.len(),
        labels.len(),
        out.display()
    );

    if videos > 0 {
        let vids = make_synthetic_videos(
            &labels,
            videos,
            video_frames,
            side,
            noise,
            seed,
            subseed(seed, "video-noise"),
        )?;
        // Keep videos out of the class-directory tree the image ingest scans.
        let vroot = out.with_file_name(format!(
            "{}-videos",
            out.file_name().and_then(|n| n.to_str()).unwrap_or("synth")
        ));
        let vdir = vroot.join("videos");
        let mut captions = BTreeMap::new();
        for v in &vids {
            let dir = vdir.join(&v.id);
            std::fs::create_dir_all(&dir)
                .map_err(|e| CliError::Runtime(format!("cannot create '{}': {e}", dir.display())))?;
            for (i, frame) in v.frames().iter().enumerate() {
                frame.save_png(dir.join(format!("frame_{i:04}.png")))?;
            }
            captions.insert(v.id.clone(), v.caption.clone());
        }
        write_summary_json(&vroot.join("captions.json"), &captions)?;
        println!(
            "wrote {} videos ({} frames each) to {}",
            vids.len(),
            video_frames,
            vdir.display()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn run_train(args: TrainArgs) -> CliResult {
    let cfg: TrainConfigFile = load_config_file(&args.config)?;
    let model = args.model.or(cfg.model).unwrap_or_else(|| "toy-aligned".into());
    let data = require(args.data.or(cfg.data), "data")?;
    let target = require(args.target.or(cfg.target), "target")?;
    let size = args.size.or(cfg.size).unwrap_or(64);
    let shape = args.shape.or(cfg.shape).unwrap_or(ShapeArg::Square);
    let frame_width = args.frame_width.or(cfg.frame_width).unwrap_or(4);
    let ingest_resize = args.ingest_resize.or(cfg.ingest_resize);
    let val_fraction = args.val_fraction.or(cfg.val_fraction).unwrap_or(0.3);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let out = require(args.out.or(cfg.out), "out")?;
    let history_out = args
        .history_out
        .or(cfg.history_out)
        .unwrap_or_else(|| with_suffix(&out, ".history.json"));
    let checkpoint_dir = args.checkpoint_dir.or(cfg.checkpoint_dir);
    let prompt_template = args.prompt_template.or(cfg.prompt_template);

    let train_cfg = TrainConfig {
        epochs: args.epochs.or(cfg.epochs).unwrap_or(5),
        learning_rate: args.lr.or(cfg.lr).unwrap_or(0.1),
        batch_size: args.batch_size.or(cfg.batch_size).unwrap_or(64),
        beta: args.beta.or(cfg.beta).unwrap_or(1.0),
        crop_enabled: args.crop_aug || cfg.crop_aug.unwrap_or(false),
        seed,
    };

    let reg = registry(&args.backends.or(cfg.backends))?;
    let enc = reg.resolve(&model)?;
    let manifest = load_image_dataset(&data, val_fraction, seed)?;
    let vocab = build_vocab(&manifest, prompt_template)?;
    let target_idx = target_index(&vocab, &target)?;
    let train_set = maybe_resize(load_split_images(&manifest, SplitArg::Train)?, ingest_resize)?;
    let val_set = maybe_resize(manifest.load_split(Split::Val)?, ingest_resize)?;

    let metadata = PatchMetadata {
        model_id: enc.model_id().to_string(),
        seed,
        train_config_hash: String::new(),
        target_label: target.clone(),
    };
    let mut init_rng = rand_chacha::ChaCha8Rng::seed_from_u64(subseed(seed, "patch-init"));
    let init = match shape {
        ShapeArg::Square => PatchSpec::square(
            Array3::from_shape_fn((size, size, 3), |_| init_rng.gen::<f64>()),
            target_idx,
            metadata,
        )?,
        ShapeArg::Frame => {
            let first = train_set.first().ok_or_else(|| {
                CliError::Runtime("training split is empty".into())
            })?;
            let (h, w) = (first.image.height(), first.image.width());
            PatchSpec::frame(
                frame_width,
                Array3::from_shape_fn((h, w, 3), |_| init_rng.gen::<f64>()),
                target_idx,
                metadata,
            )?
        }
    };

    let val_opt = if val_set.is_empty() { None } else { Some(&val_set[..]) };
    let (patch, history) = train_patch_with_checkpoints(
        &train_set,
        &enc,
        &vocab,
        target_idx,
        &init,
        &train_cfg,
        val_opt,
        checkpoint_dir.as_deref(),
    )?;
    for e in &history.epochs {
        println!(
            "epoch {}: loss {:.4}  val asr@1 {:.4}  val asr@5 {:.4}  ({:.1}s)",
            e.epoch, e.mean_loss, e.val_asr1, e.val_asr5, e.wall_secs
        );
    }

    let artifact = PatchArtifact::new(
        patch,
        Some(enc.preprocess_config().clone()),
        Some(train_cfg),
    );
    save_patch(&artifact, &out)?;
    let mut history_json = serde_json::to_string_pretty(&history)
        .map_err(|e| CliError::Runtime(format!("history serialization: {e}")))?;
    history_json.push('\n');
    std::fs::write(&history_out, history_json)
        .map_err(|e| CliError::Runtime(format!("cannot write '{}': {e}", history_out.display())))?;
    println!("saved patch to {}", out.display());
    println!("saved history to {}", history_out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn run_eval(args: EvalArgs) -> CliResult {
    let cfg: EvalConfigFile = load_config_file(&args.config)?;
    let data = require(args.data.or(cfg.data), "data")?;
    let out = require(args.out.or(cfg.out), "out")?;
    let split = args.split.or(cfg.split).unwrap_or(SplitArg::Val);
    let val_fraction = args.val_fraction.or(cfg.val_fraction).unwrap_or(0.3);
    let repeats = args.repeats.or(cfg.repeats).unwrap_or(5);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let topk = parse_usize_list(
        &args.topk.or(cfg.topk).unwrap_or_else(|| "1,5".into()),
        "topk",
    )?;
    let ingest_resize = args.ingest_resize.or(cfg.ingest_resize);
    let clean_out = args
        .clean_out
        .or(cfg.clean_out)
        .unwrap_or_else(|| with_suffix(&out, ".clean.jsonl"));
    let summary_out = args
        .summary_out
        .or(cfg.summary_out)
        .unwrap_or_else(|| with_suffix(&out, ".summary.json"));

    let patch_path = args.patch.or(cfg.patch);
    let text = args.text.or(cfg.text);
    let patch_image = args.patch_image.or(cfg.patch_image);
    let sources = patch_path.is_some() as u8 + text.is_some() as u8 + patch_image.is_some() as u8;
    if sources != 1 {
        return Err(CliError::Usage(
            "exactly one of --patch, --text, --patch-image is required".into(),
        ));
    }

    // Resolve the patch, its target label and the backing model.
    let mut model = args.model.or(cfg.model);
    let mut target = args.target.or(cfg.target);
    let spec = if let Some(path) = patch_path {
        let artifact = load_patch(&path)?;
        if model.is_none() && !artifact.spec.metadata.model_id.is_empty() {
            model = Some(artifact.spec.metadata.model_id.clone());
        }
        if target.is_none() && !artifact.spec.metadata.target_label.is_empty() {
            target = Some(artifact.spec.metadata.target_label.clone());
        }
        artifact.spec
    } else if let Some(text) = text {
        let area = require(args.area.or(cfg.area), "area")?;
        let label = require(target.clone(), "target")?;
        PatchSpec::text(
            text,
            area,
            0,
            PatchMetadata {
                target_label: label,
                ..PatchMetadata::default()
            },
        )?
    } else {
        let image_path = patch_image.expect("checked above");
        let side = args.size.or(cfg.size).unwrap_or(64);
        let label = require(target.clone(), "target")?;
        let img = ImageTensor::from_file(&image_path)?;
        let control = resize_image(&img, side)?;
        PatchSpec::square(
            control.into_pixels(),
            0,
            PatchMetadata {
                target_label: label,
                ..PatchMetadata::default()
            },
        )?
    };
    let model = model.unwrap_or_else(|| "toy-aligned".into());
    let target = require(target, "target")?;

    let reg = registry(&args.backends.or(cfg.backends))?;
    let enc = reg.resolve(&model)?;
    let manifest = load_image_dataset(&data, val_fraction, seed)?;
    let vocab = build_vocab(&manifest, args.prompt_template.or(cfg.prompt_template))?;
    let target_idx = target_index(&vocab, &target)?;
    let images = maybe_resize(load_split_images(&manifest, split)?, ingest_resize)?;

    let outcome = evaluate_patch(
        &images, &enc, &vocab, &spec, target_idx, repeats, &topk, seed,
    )?;
    write_records_jsonl(&out, &outcome.records)?;
    write_records_jsonl(&clean_out, &outcome.clean_records)?;
    write_summary_json(&summary_out, &outcome.summary)?;
    for &k in &topk {
        println!(
            "ASR@{k} {:.4}  (clean {:.4})",
            outcome.summary.asr[&k], outcome.summary.clean_asr[&k]
        );
    }
    println!(
        "evaluated {} images x {} repeats; records: {}",
        outcome.summary.n_images,
        repeats,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline-pgd
// ---------------------------------------------------------------------------

#[derive(serde::Serialize)]
struct PgdSummary {
    target_label: String,
    n_images: usize,
    budget_eps: f64,
    budget_alpha: f64,
    budget_steps: usize,
    asr: BTreeMap<usize, f64>,
    clean_asr: BTreeMap<usize, f64>,
    /// Fraction of images whose top-1 prediction changed (the universal
    /// perturbation majority-deception indicator).
    flip_rate: f64,
}

pub fn run_pgd(args: PgdArgs) -> CliResult {
    let cfg: PgdConfigFile = load_config_file(&args.config)?;
    let model = args.model.or(cfg.model).unwrap_or_else(|| "toy-aligned".into());
    let data = require(args.data.or(cfg.data), "data")?;
    let target = require(args.target.or(cfg.target), "target")?;
    let out = require(args.out.or(cfg.out), "out")?;
    let split = args.split.or(cfg.split).unwrap_or(SplitArg::Val);
    let val_fraction = args.val_fraction.or(cfg.val_fraction).unwrap_or(0.3);
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let topk = parse_usize_list(
        &args.topk.or(cfg.topk).unwrap_or_else(|| "1,5".into()),
        "topk",
    )?;
    let budget = AttackBudget::new(
        args.eps.or(cfg.eps).unwrap_or(0.05),
        args.alpha.or(cfg.alpha).unwrap_or(0.01),
        args.steps.or(cfg.steps).unwrap_or(10),
    )?;
    let summary_out = args
        .summary_out
        .or(cfg.summary_out)
        .unwrap_or_else(|| with_suffix(&out, ".summary.json"));

    let reg = registry(&args.backends.or(cfg.backends))?;
    let enc = reg.resolve(&model)?;
    let manifest = load_image_dataset(&data, val_fraction, seed)?;
    let vocab = build_vocab(&manifest, args.prompt_template.or(cfg.prompt_template))?;
    let target_idx = target_index(&vocab, &target)?;
    let images = load_split_images(&manifest, split)?;

    let label_emb = embed_texts(&enc, &vocab, true)?;
    let k_max = topk.iter().copied().max().unwrap().min(vocab.len());

    let mut records = Vec::with_capacity(images.len());
    let mut clean_records = Vec::with_capacity(images.len());
    for li in &images {
        let original = vocab.label(li.label)?.to_string();
        clean_records.push(EvalRecord {
            image_id: li.id.clone(),
            original_label: original.clone(),
            target_label: target.clone(),
            topk_predictions: rank_labels(&li.image, &enc, &vocab, label_emb.view(), k_max)?,
            repeat_index: 0,
        });
        let loss_fn = pixel_ce_loss_fn(&enc, label_emb.clone(), target_idx)?;
        let attacked = pgd_attack(&li.image, loss_fn, &budget, true)?;
        records.push(EvalRecord {
            image_id: li.id.clone(),
            original_label: original,
            target_label: target.clone(),
            topk_predictions: rank_labels(&attacked, &enc, &vocab, label_emb.view(), k_max)?,
            repeat_index: 0,
        });
    }

    let mut asr_map = BTreeMap::new();
    let mut clean_map = BTreeMap::new();
    for &k in &topk {
        let kk = k.min(vocab.len());
        asr_map.insert(k, asr(&records, kk)?);
        clean_map.insert(k, asr(&clean_records, kk)?);
    }
    let summary = PgdSummary {
        target_label: target,
        n_images: images.len(),
        budget_eps: budget.epsilon,
        budget_alpha: budget.alpha,
        budget_steps: budget.steps,
        asr: asr_map,
        clean_asr: clean_map,
        flip_rate: flip_rate(&clean_records, &records)?,
    };
    write_records_jsonl(&out, &records)?;
    write_records_jsonl(with_suffix(&out, ".clean.jsonl"), &clean_records)?;
    write_summary_json(&summary_out, &summary)?;
    for &k in &topk {
        println!(
            "ASR@{k} {:.4}  (clean {:.4})",
            summary.asr[&k], summary.clean_asr[&k]
        );
    }
    println!("flip rate {:.4}", summary.flip_rate);
    Ok(())
}

// ---------------------------------------------------------------------------
// attack-video
// ---------------------------------------------------------------------------

pub fn run_video(args: VideoArgs) -> CliResult {
    let cfg: VideoConfigFile = load_config_file(&args.config)?;
    let patch_path = require(args.patch.or(cfg.patch), "patch")?;
    let videos_dir = require(args.videos.or(cfg.videos), "videos")?;
    let captions = require(args.captions.or(cfg.captions), "captions")?;
    let out = require(args.out.or(cfg.out), "out")?;
    let keyframes = args.keyframes.or(cfg.keyframes).unwrap_or(10);
    let selection = match args
        .frame_selection
        .or(cfg.frame_selection)
        .unwrap_or(FrameSelectionArg::Random)
    {
        FrameSelectionArg::Random => FrameSelection::Random,
        FrameSelectionArg::Prefix => FrameSelection::Prefix,
    };
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let fractions = parse_f64_list(
        &args
            .fractions
            .or(cfg.fractions)
            .unwrap_or_else(|| "0,0.2,0.4,0.6,0.8,1".into()),
        "fractions",
    )?;

    let artifact = load_patch(&patch_path)?;
    let model = args
        .model
        .or(cfg.model)
        .or_else(|| {
            let id = artifact.spec.metadata.model_id.clone();
            (!id.is_empty()).then_some(id)
        })
        .unwrap_or_else(|| "toy-aligned".into());
    let reg = registry(&args.backends.or(cfg.backends))?;
    let enc = reg.resolve(&model)?;
    let videos = load_video_dir(&videos_dir, &captions)?;
    let curve = video_asr_full(
        &videos,
        &artifact.spec,
        &fractions,
        &enc,
        seed,
        keyframes,
        selection,
    )?;
    write_summary_json(&out, &curve)?;
    for p in &curve {
        println!(
            "fraction {:.2}: ASR1&4 {:.4}  ASR1&2 {:.4}",
            p.fraction, p.asr_1_4, p.asr_1_2
        );
    }
    println!("wrote curve to {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

pub fn run_report(args: ReportArgs) -> CliResult {
    let cfg: ReportConfigFile = load_config_file(&args.config)?;
    let out = require(args.out.or(cfg.out), "out")?;
    let input = args.input.or(cfg.input);
    let curve = args.curve.or(cfg.curve);
    let history = args.history.or(cfg.history);
    if input.is_none() && curve.is_none() && history.is_none() {
        return Err(CliError::Usage(
            "nothing to report: provide --in, --curve or --history".into(),
        ));
    }
    let topk = parse_usize_list(
        &args.topk.or(cfg.topk).unwrap_or_else(|| "1,5".into()),
        "topk",
    )?;

    if let Some(input) = input {
        let records = read_records_jsonl(&input)?;
        let clean_path = args
            .clean
            .or(cfg.clean)
            .or_else(|| {
                let sibling = with_suffix(&input, ".clean.jsonl");
                sibling.is_file().then_some(sibling)
            });
        let clean = match &clean_path {
            Some(p) => Some(read_records_jsonl(p)?),
            None => None,
        };
        let paths = report_records(&records, clean.as_deref(), &topk, &out)?;
        if let Some(p) = paths.summary_csv {
            println!("wrote {}", p.display());
        }
        if let Some(p) = paths.asr_svg {
            println!("wrote {}", p.display());
        }
    }
    if let Some(curve_path) = curve {
        let text = std::fs::read_to_string(&curve_path)
            .map_err(|e| CliError::Runtime(format!("cannot read '{}': {e}", curve_path.display())))?;
        let curve: Vec<advpatch::video::CurvePoint> = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("bad curve file: {e}")))?;
        let paths = report_curve(&curve, &out)?;
        if let Some(p) = paths.curve_svg {
            println!("wrote {}", p.display());
        }
        if let Some(p) = paths.curve_csv {
            println!("wrote {}", p.display());
        }
    }
    if let Some(history_path) = history {
        let text = std::fs::read_to_string(&history_path).map_err(|e| {
            CliError::Runtime(format!("cannot read '{}': {e}", history_path.display()))
        })?;
        let history: TrainHistory = serde_json::from_str(&text)
            .map_err(|e| CliError::Runtime(format!("bad history file: {e}")))?;
        let paths = report_history(&history, &out)?;
        if let Some(p) = paths.loss_svg {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
