//! Acceptance suite. One test per criterion; each prints a PASS line when it
//! holds (run with `--nocapture` to see them). Every tolerance is pinned in
//! code here.
//!
//! Criterion 9 (pretrained-backend replication) needs external model weights
//! and data, so it is `#[ignore]` by default; see its doc comment.

use advpatch::encoders::{embed_texts, make_toy_encoder_with, LabelVocabulary};
use advpatch::evaluation::{asr, evaluate_patch, perplexity, EvalRecord, GenerativeOutput};
use advpatch::image::ImageTensor;
use advpatch::objectives::{
    clip_loss, patch_loss, pgd_attack_traced, siglip_loss, standard_pair_labels, AttackBudget,
};
use advpatch::patch::{PatchMetadata, PatchSpec};
use advpatch::synth::{default_labels, make_aligned_encoder, make_synthetic_dataset};
use advpatch::training::{square_patch_loss, square_patch_loss_grad, train_patch, TrainConfig};
use advpatch::video::{asr_from_quads, extract_keyframes, infect_frames, score_video, ClipScoreQuad};
use ndarray::{arr2, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN_2: f64 = std::f64::consts::LN_2;

/// 1. Patch-loss gradient through apply -> preprocess -> embed matches
///    central finite differences at relative error <= 1e-3 (16x16 images,
///    8x8 patch, toy encoder, well under 10 s).
#[test]
fn criterion_1_gradient_correctness() {
    let start = std::time::Instant::now();
    let enc = make_toy_encoder_with(8, 9, 12, 10.0).unwrap();
    let vocab = LabelVocabulary::new(
        ["ant", "bee", "cat", "dog"].iter().map(|s| s.to_string()).collect(),
    )
    .unwrap();
    let label_emb = embed_texts(&enc, &vocab, true).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let images: Vec<ImageTensor> = (0..3)
        .map(|_| {
            ImageTensor::from_fn(16, 16, |_, _, _| 0.2 + 0.6 * rng.gen::<f64>()).unwrap()
        })
        .collect();
    let placements: Vec<(usize, usize)> = (0..3)
        .map(|_| (rng.gen_range(0..=8), rng.gen_range(0..=8)))
        .collect();
    let patch = Array3::from_shape_fn((8, 8, 3), |_| 0.3 + 0.4 * rng.gen::<f64>());
    let target = 2;

    let (_, analytic) =
        square_patch_loss_grad(&images, &placements, &patch, &enc, label_emb.view(), target)
            .unwrap();

    let h = 1e-5;
    let mut numeric = Array3::zeros(patch.raw_dim());
    for i in 0..8 {
        for j in 0..8 {
            for c in 0..3 {
                let mut plus = patch.clone();
                plus[[i, j, c]] += h;
                let mut minus = patch.clone();
                minus[[i, j, c]] -= h;
                let fp =
                    square_patch_loss(&images, &placements, &plus, &enc, label_emb.view(), target)
                        .unwrap();
                let fm = square_patch_loss(
                    &images,
                    &placements,
                    &minus,
                    &enc,
                    label_emb.view(),
                    target,
                )
                .unwrap();
                numeric[[i, j, c]] = (fp - fm) / (2.0 * h);
            }
        }
    }
    let diff_norm: f64 = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let ref_norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let rel = diff_norm / ref_norm;
    assert!(rel <= 1e-3, "gradient relative error {rel}");
    assert!(start.elapsed().as_secs() < 10, "gradient check too slow");
    println!("ACCEPTANCE 1 (gradient correctness): PASS (rel err {rel:.2e})");
}

/// 2. Loss identities at their pinned tolerances.
#[test]
fn criterion_2_loss_identities() {
    // clip_loss, B = 1: exactly zero.
    let x = arr2(&[[0.6, 0.8]]);
    let y = arr2(&[[1.0, 0.0]]);
    assert_eq!(clip_loss(x.view(), y.view(), 55.0).unwrap(), 0.0);

    // Degenerate B = 2 (all rows equal): ln 2 within 1e-9.
    let x = arr2(&[[1.0, 0.0], [1.0, 0.0]]);
    let loss = clip_loss(x.view(), x.view(), 3.0).unwrap();
    assert!((loss - LN_2).abs() < 1e-9);

    // patch_loss with equal logits: ln N within 1e-9 (N = 7). Every label
    // vector is orthogonal to the image embedding, so all logits are zero.
    let img = arr2(&[[0.0, 1.0]]);
    let labels = Array2::from_shape_fn((7, 2), |(i, j)| {
        if j == 0 {
            if i % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        } else {
            0.0
        }
    });
    let loss = patch_loss(img.view(), labels.view(), 3, 11.0).unwrap();
    assert!((loss - 7.0f64.ln()).abs() < 1e-9);

    // siglip_loss, B = 1, zero similarity, b = 0: ln 2 within 1e-9.
    let x = arr2(&[[1.0, 0.0]]);
    let y = arr2(&[[0.0, 1.0]]);
    let z = standard_pair_labels(1);
    let loss = siglip_loss(x.view(), y.view(), z.view(), 7.0, 0.0).unwrap();
    assert!((loss - LN_2).abs() < 1e-9);

    println!("ACCEPTANCE 2 (loss identities): PASS");
}

/// Independent brute-force ASR recount (sorted ids so sums match bit-wise).
fn brute_force_asr(records: &[EvalRecord], k: usize) -> Option<f64> {
    let mut ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    ids.sort();
    ids.dedup();
    let mut fractions = Vec::new();
    for id in ids {
        let group: Vec<&EvalRecord> = records.iter().filter(|r| r.image_id == id).collect();
        if group[0].original_label == group[0].target_label {
            continue;
        }
        let hits = group
            .iter()
            .filter(|r| r.topk_predictions.iter().take(k).any(|p| *p == r.target_label))
            .count();
        fractions.push(hits as f64 / group.len() as f64);
    }
    if fractions.is_empty() {
        None
    } else {
        Some(fractions.iter().sum::<f64>() / fractions.len() as f64)
    }
}

/// 3. ASR equals the brute-force recount on 10^4 randomized records, exactly,
///    including the C_i = C_t exclusion; ASR@5 >= ASR@1.
#[test]
fn criterion_3_metric_oracle_equivalence() {
    let labels = ["cake", "dog", "cat", "piano", "zebra", "galaxy", "ant"];
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let records: Vec<EvalRecord> = (0..10_000)
        .map(|_| {
            let img = rng.gen_range(0..500usize);
            let original = labels[img % labels.len()];
            let mut preds: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
            for i in (1..preds.len()).rev() {
                preds.swap(i, rng.gen_range(0..=i));
            }
            preds.truncate(rng.gen_range(1..=labels.len()));
            EvalRecord {
                image_id: format!("img{img:03}"),
                original_label: original.to_string(),
                target_label: "cake".to_string(),
                topk_predictions: preds,
                repeat_index: 0,
            }
        })
        .collect();
    for k in 1..=labels.len() {
        let a = asr(&records, k).unwrap();
        let b = brute_force_asr(&records, k).unwrap();
        assert_eq!(a, b, "k = {k}");
    }
    let a1 = asr(&records, 1).unwrap();
    let a5 = asr(&records, 5).unwrap();
    assert!(a5 >= a1, "ASR@5 {a5} < ASR@1 {a1}");
    println!("ACCEPTANCE 3 (metric oracle equivalence): PASS (asr@1 {a1:.4}, asr@5 {a5:.4})");
}

/// 4. PGD feasibility on 10^4 random instances: every iterate inside the
///    epsilon ball and [0, 1], zero violations.
#[test]
fn criterion_4_pgd_feasibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut violations = 0usize;
    let mut iterates = 0usize;
    for _ in 0..10_000 {
        let img = ImageTensor::from_fn(3, 3, |_, _, _| rng.gen()).unwrap();
        let budget = AttackBudget::new(
            rng.gen_range(0.01..0.3),
            rng.gen_range(0.005..0.2),
            rng.gen_range(1..=3),
        )
        .unwrap();
        let targeted = rng.gen::<bool>();
        let x0 = img.pixels().clone();
        let mut grad_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let eps = budget.epsilon;
        let mut local = 0usize;
        pgd_attack_traced(
            &img,
            |x| {
                let g = Array3::from_shape_fn(x.pixels().raw_dim(), |_| {
                    grad_rng.gen::<f64>() - 0.5
                });
                Ok((0.0, g))
            },
            &budget,
            targeted,
            |x| {
                local += 1;
                for (a, b) in x.iter().zip(x0.iter()) {
                    if (a - b).abs() > eps + 1e-9 || !(0.0..=1.0).contains(a) {
                        violations += 1;
                    }
                }
            },
        )
        .unwrap();
        iterates += local;
    }
    assert_eq!(violations, 0, "feasibility violations detected");
    assert!(iterates >= 10_000);
    println!("ACCEPTANCE 4 (PGD feasibility): PASS ({iterates} iterates, 0 violations)");
}

/// 5. Training efficacy on the rigged toy testbed: 64x64 patch, 200 synthetic
///    images, 10 classes, 5 epochs. Final-epoch mean loss < first-epoch mean
///    loss and ASR@1 >= 0.8, in under 2 minutes.
#[test]
fn criterion_5_training_efficacy() {
    let start = std::time::Instant::now();
    let labels = default_labels(10).unwrap();
    let vocab = LabelVocabulary::new(labels.clone()).unwrap();
    let enc = make_aligned_encoder(16, 0).unwrap();
    let train = make_synthetic_dataset(&labels, 20, 72, 0.15, 0, 7).unwrap();
    let val = make_synthetic_dataset(&labels, 6, 72, 0.15, 0, 8).unwrap();
    assert_eq!(train.len(), 200);

    let init = PatchSpec::square(
        Array3::from_elem((64, 64, 3), 0.5),
        0,
        PatchMetadata::default(),
    )
    .unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 0.1,
        batch_size: 8,
        beta: 1.0,
        crop_enabled: false,
        seed: 3,
    };
    let (patch, history) = train_patch(&train, &enc, &vocab, 0, &init, &cfg, Some(&val)).unwrap();

    let first = history.epochs.first().unwrap().mean_loss;
    let last = history.epochs.last().unwrap().mean_loss;
    assert!(last < first, "mean loss did not decrease: {first} -> {last}");

    let outcome = evaluate_patch(&val, &enc, &vocab, &patch, 0, 5, &[1, 5], 99).unwrap();
    let asr1 = outcome.summary.asr[&1];
    assert!(asr1 >= 0.8, "ASR@1 {asr1} below 0.8");
    // Clean images on the correct toy classifier: ASR@1 reference is zero.
    assert_eq!(outcome.summary.clean_asr[&1], 0.0);

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "training run too slow: {elapsed:?}");
    println!(
        "ACCEPTANCE 5 (training efficacy): PASS (loss {first:.3} -> {last:.3}, ASR@1 {asr1:.4}, {:.1}s)",
        elapsed.as_secs_f64()
    );
}

/// 6. Video identities: rho = 0 collapses s1/s3 and s2/s4 exactly; identical
///    captions collapse s1/s4 exactly; constructed-quad curves are exact;
///    infection counts equal ceil(rho * 10) for rho in {0, 0.1, ..., 1}.
#[test]
fn criterion_6_video_identities() {
    let labels = default_labels(3).unwrap();
    let enc = make_aligned_encoder(8, 1).unwrap();
    let videos =
        advpatch::synth::make_synthetic_videos(&labels, 2, 20, 48, 0.12, 1, 4).unwrap();
    let patch = PatchSpec::square(
        Array3::from_elem((12, 12, 3), 0.98),
        0,
        PatchMetadata {
            target_label: "cake".into(),
            ..PatchMetadata::default()
        },
    )
    .unwrap();

    for video in &videos {
        let kf = extract_keyframes(video, 10).unwrap();
        assert_eq!(kf.len(), 10);
        let untouched = infect_frames(&kf, &patch, 0.0, 5).unwrap();
        let quad = score_video(&kf, &untouched, &video.caption, "cake", &enc).unwrap();
        assert_eq!(quad.s1, quad.s3);
        assert_eq!(quad.s2, quad.s4);

        let attacked = infect_frames(&kf, &patch, 0.4, 5).unwrap();
        let quad = score_video(&kf, &attacked, &video.caption, &video.caption, &enc).unwrap();
        assert_eq!(quad.s1, quad.s4);
        assert_eq!(quad.s2, quad.s3);

        // Infection counts for every tenth fraction.
        for tenth in 0..=10usize {
            let rho = tenth as f64 / 10.0;
            let adv = infect_frames(&kf, &patch, rho, 11).unwrap();
            let changed = kf
                .frames
                .iter()
                .zip(adv.frames.iter())
                .filter(|(a, b)| a != b)
                .count();
            assert_eq!(changed, tenth, "rho = {rho}");
        }
    }

    // Constructed quads give exact curve values.
    let mut quads = vec![
        ClipScoreQuad {
            s1: 60.0,
            s2: 55.0,
            s3: 20.0,
            s4: 59.0,
        };
        7
    ];
    quads.push(ClipScoreQuad {
        s1: 10.0,
        s2: 55.0,
        s3: 20.0,
        s4: 59.0,
    });
    let (a14, a12) = asr_from_quads(&quads).unwrap();
    assert_eq!(a14, 7.0 / 8.0);
    assert_eq!(a12, 7.0 / 8.0);
    println!("ACCEPTANCE 6 (video identities): PASS");
}

/// 7. Perplexity: uniform 100-token vocabulary gives 100 (up to the f64
///    exp/ln round-trip, <= 1e-12 relative); the exp(cross-entropy) form
///    agrees within 1e-12.
#[test]
fn criterion_7_perplexity() {
    let out = GenerativeOutput {
        text: String::new(),
        token_logprobs: vec![(0.01f64).ln(); 9],
    };
    let ppl = perplexity(&out).unwrap();
    assert!((ppl - 100.0).abs() <= 1e-12 * 100.0, "ppl {ppl}");

    let probs = [0.37f64, 0.05, 0.99, 0.5, 0.125];
    let out = GenerativeOutput {
        text: String::new(),
        token_logprobs: probs.iter().map(|p| p.ln()).collect(),
    };
    let ppl = perplexity(&out).unwrap();
    let cross_entropy = -probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64;
    let alt = cross_entropy.exp();
    assert!((ppl - alt).abs() <= 1e-12 * ppl, "{ppl} vs {alt}");
    println!("ACCEPTANCE 7 (perplexity): PASS");
}

/// 8. Two identical seeded end-to-end CLI runs (toy backend) produce
///    byte-identical result files.
#[test]
fn criterion_8_cli_determinism() {
    std::env::set_var("SOURCE_DATE_EPOCH", "1700000000");
    let dir = tempfile::tempdir().unwrap();
    let path = |name: &str| dir.path().join(name).to_str().unwrap().to_string();

    let run = |args: &[&str]| {
        let mut argv = vec!["advpatch"];
        argv.extend_from_slice(args);
        let code = advpatch_cli::run_cli(argv);
        assert_eq!(code, 0, "command failed: {args:?}");
    };

    run(&[
        "synth", "--out", &path("data"), "--classes", "4", "--per-class", "6",
        "--side", "48", "--noise", "0.15", "--seed", "0",
    ]);
    for tag in ["1", "2"] {
        run(&[
            "train", "--model", "toy-aligned-d8-s0", "--data", &path("data"),
            "--target", "cake", "--size", "24", "--epochs", "2", "--batch-size", "4",
            "--seed", "5", "--out", &path(&format!("p{tag}.pa")),
        ]);
        run(&[
            "eval", "--patch", &path(&format!("p{tag}.pa")), "--data", &path("data"),
            "--topk", "1,2", "--repeats", "3", "--seed", "9",
            "--out", &path(&format!("r{tag}.jsonl")),
        ]);
    }
    let bytes = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    assert_eq!(bytes("p1.pa"), bytes("p2.pa"), "patch artifacts differ");
    assert_eq!(bytes("r1.jsonl"), bytes("r2.jsonl"), "record files differ");
    assert_eq!(
        bytes("r1.clean.jsonl"),
        bytes("r2.clean.jsonl"),
        "clean record files differ"
    );
    assert_eq!(
        bytes("r1.summary.json"),
        bytes("r2.summary.json"),
        "summaries differ"
    );
    println!("ACCEPTANCE 8 (CLI determinism): PASS");
}

/// 9. [EXTENDED] Paper-scale replication with a pretrained backend.
///
/// Requires a user-wired pretrained encoder (e.g. a ViT-B/16 adapter) and a
/// Caltech-256-style dataset with at least 20 classes, roughly one GPU-hour.
/// Run the documented recipe, then point `ADVPATCH_EXTENDED_RESULTS` at a
/// directory containing `square64.summary.json`, `frame_w1.summary.json`,
/// and `frame_w4.summary.json` (eval summaries) and run this test with
/// `--ignored`.
#[test]
#[ignore = "needs a pretrained backend, a Caltech-256 subset and ~1 GPU-hour; see doc comment"]
fn criterion_9_extended_pretrained_replication() {
    let dir = std::env::var("ADVPATCH_EXTENDED_RESULTS").expect(
        "set ADVPATCH_EXTENDED_RESULTS to the directory with the extended-run summaries",
    );
    let load = |name: &str| -> advpatch::evaluation::EvalSummary {
        let text = std::fs::read_to_string(std::path::Path::new(&dir).join(name))
            .unwrap_or_else(|e| panic!("cannot read {name}: {e}"));
        serde_json::from_str(&text).unwrap_or_else(|e| panic!("bad {name}: {e}"))
    };
    let square = load("square64.summary.json");
    assert!(square.asr[&1] >= 0.5, "square ASR@1 {}", square.asr[&1]);
    assert!(square.asr[&5] >= 0.8, "square ASR@5 {}", square.asr[&5]);
    assert!(
        square.clean_asr[&1] <= 0.001,
        "clean ASR@1 {}",
        square.clean_asr[&1]
    );
    let w1 = load("frame_w1.summary.json");
    let w4 = load("frame_w4.summary.json");
    assert!(
        w4.asr[&1] > w1.asr[&1],
        "frame ordering violated: W=4 {} vs W=1 {}",
        w4.asr[&1],
        w1.asr[&1]
    );
    println!("ACCEPTANCE 9 (extended pretrained replication): PASS");
}
