//! Property tests for the cross-module invariants.

use advpatch::encoders::{embed_images, make_toy_encoder_with};
use advpatch::evaluation::{asr, perplexity, EvalRecord, GenerativeOutput};
use advpatch::image::ImageTensor;
use advpatch::objectives::{clip_loss, pgd_attack_traced, AttackBudget};
use advpatch::patch::{apply_patch, PatchMetadata, PatchSpec, PlacementPolicy};
use advpatch::preprocess::{preprocess, PreprocessConfig};
use advpatch::training::crop_resize_augment;
use advpatch::video::{extract_keyframes, infect_frames, VideoSample};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seeded_pixels(h: usize, w: usize, seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((h, w, 3), |_| rng.gen())
}

/// Brute-force ASR recount, written independently of `evaluation::asr`:
/// linear scans per image id, ids visited in sorted order so that the
/// floating-point sums match bit for bit.
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
            .filter(|r| {
                r.topk_predictions
                    .iter()
                    .take(k)
                    .any(|p| *p == r.target_label)
            })
            .count();
        fractions.push(hits as f64 / group.len() as f64);
    }
    if fractions.is_empty() {
        None
    } else {
        Some(fractions.iter().sum::<f64>() / fractions.len() as f64)
    }
}

/// Randomized records sharing one target; per-image original labels are a
/// stable function of the id so groups stay well formed.
fn random_records(seed: u64, n: usize) -> Vec<EvalRecord> {
    let labels = ["cake", "dog", "cat", "piano", "zebra", "galaxy"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let img = rng.gen_range(0..20usize);
            let original = labels[img % labels.len()];
            let mut preds: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
            for i in (1..preds.len()).rev() {
                preds.swap(i, rng.gen_range(0..=i));
            }
            preds.truncate(rng.gen_range(1..=labels.len()));
            EvalRecord {
                image_id: format!("img{img:02}"),
                original_label: original.to_string(),
                target_label: "cake".to_string(),
                topk_predictions: preds,
                repeat_index: 0,
            }
        })
        .collect()
}

proptest! {
    /// Pixels outside the replaced rectangle are bit-identical to the input;
    /// pixels inside equal the patch values with zero tolerance.
    #[test]
    fn apply_patch_preserves_complement(
        img_h in 1usize..12, img_w in 1usize..12,
        ph in 1usize..12, pw in 1usize..12,
        seed in 0u64..1000,
    ) {
        prop_assume!(ph <= img_h && pw <= img_w);
        let img = ImageTensor::new(seeded_pixels(img_h, img_w, seed)).unwrap();
        let params = seeded_pixels(ph, pw, seed ^ 0xABCD);
        let patch = PatchSpec::square(params.clone(), 0, PatchMetadata::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let row = rng.gen_range(0..=img_h - ph);
        let col = rng.gen_range(0..=img_w - pw);
        let out = apply_patch(&img, &patch, &PlacementPolicy::fixed(row, col)).unwrap();
        for i in 0..img_h {
            for j in 0..img_w {
                for c in 0..3 {
                    let inside = i >= row && i < row + ph && j >= col && j < col + pw;
                    if inside {
                        prop_assert_eq!(out.pixels()[[i, j, c]], params[[i - row, j - col, c]]);
                    } else {
                        prop_assert_eq!(out.pixels()[[i, j, c]], img.pixels()[[i, j, c]]);
                    }
                }
            }
        }
    }

    /// ASR@k is non-decreasing in k, and records whose original label equals
    /// the target never influence the value.
    #[test]
    fn asr_monotone_and_exclusion_invariant(seed in 0u64..500, n in 5usize..60) {
        let records = random_records(seed, n);
        if let Ok(a1) = asr(&records, 1) {
            let mut prev = a1;
            for k in 2..=6 {
                let ak = asr(&records, k).unwrap();
                prop_assert!(ak >= prev - 1e-15);
                prev = ak;
            }
            // Adding target-labelled images must not change anything.
            let mut padded = records.clone();
            for extra in 0..3 {
                padded.push(EvalRecord {
                    image_id: format!("selfimg{extra}"),
                    original_label: "cake".into(),
                    target_label: "cake".into(),
                    topk_predictions: vec!["cake".into()],
                    repeat_index: 0,
                });
            }
            for k in 1..=6 {
                prop_assert_eq!(asr(&records, k).unwrap(), asr(&padded, k).unwrap());
            }
        }
    }

    /// The metric agrees exactly with an independent brute-force recount.
    #[test]
    fn asr_matches_brute_force(seed in 0u64..500, n in 1usize..80) {
        let records = random_records(seed, n);
        for k in 1..=6 {
            match (asr(&records, k), brute_force_asr(&records, k)) {
                (Ok(a), Some(b)) => prop_assert_eq!(a, b),
                (Err(_), None) => {}
                (a, b) => prop_assert!(false, "disagree: {:?} vs {:?}", a, b),
            }
        }
    }

    /// Perplexity equals the exponentiated cross-entropy computed as a
    /// separate form (product of probabilities).
    #[test]
    fn perplexity_equals_exp_cross_entropy(
        probs in proptest::collection::vec(0.001f64..1.0, 1..12)
    ) {
        let out = GenerativeOutput {
            text: String::new(),
            token_logprobs: probs.iter().map(|p| p.ln()).collect(),
        };
        let ppl = perplexity(&out).unwrap();
        let product: f64 = probs.iter().product();
        let alt = product.powf(-1.0 / probs.len() as f64);
        prop_assert!((ppl - alt).abs() <= 1e-12 * ppl.max(1.0));
    }

    /// Augmentation output keeps the input shape and the pixel box.
    #[test]
    fn augmentation_preserves_shape_and_box(
        h in 2usize..12, w in 2usize..12, beta in 0.0f64..2.0, seed in 0u64..500,
    ) {
        let p = seeded_pixels(h, w, seed);
        let out = crop_resize_augment(&p, beta, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(out.dim(), (h, w, 3));
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    /// Every PGD iterate stays within the epsilon ball and the pixel box.
    #[test]
    fn pgd_iterates_feasible(
        seed in 0u64..300,
        eps in 0.01f64..0.3,
        alpha in 0.005f64..0.2,
        steps in 1usize..6,
    ) {
        let img = ImageTensor::new(seeded_pixels(3, 3, seed)).unwrap();
        let budget = AttackBudget::new(eps, alpha, steps).unwrap();
        let x0 = img.pixels().clone();
        let mut grads = ChaCha8Rng::seed_from_u64(seed ^ 0x5555);
        pgd_attack_traced(
            &img,
            |x| {
                let g = Array3::from_shape_fn(x.pixels().raw_dim(), |_| grads.gen::<f64>() - 0.5);
                Ok((0.0, g))
            },
            &budget,
            seed % 2 == 0,
            |x| {
                for (a, b) in x.iter().zip(x0.iter()) {
                    assert!((a - b).abs() <= eps + 1e-9);
                    assert!((0.0..=1.0).contains(a));
                }
            },
        )
        .unwrap();
    }

    /// CLIP loss is exactly invariant under simultaneous row permutations.
    #[test]
    fn clip_loss_permutation_invariance(seed in 0u64..300, b in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |rows: usize| {
            let mut m = Array2::from_shape_fn((rows, 5), |_| rng.gen::<f64>() - 0.5);
            for mut row in m.rows_mut() {
                let n = row.dot(&row).sqrt().max(1e-9);
                row.mapv_inplace(|v| v / n);
            }
            m
        };
        let x = make(b);
        let y = make(b);
        let mut perm: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let mut xp = Array2::zeros((b, 5));
        let mut yp = Array2::zeros((b, 5));
        for (to, &from) in perm.iter().enumerate() {
            xp.row_mut(to).assign(&x.row(from));
            yp.row_mut(to).assign(&y.row(from));
        }
        let t = 1.0 + (seed % 7) as f64;
        prop_assert_eq!(
            clip_loss(x.view(), y.view(), t).unwrap(),
            clip_loss(xp.view(), yp.view(), t).unwrap()
        );
    }

    /// Keyframe indices are strictly increasing; infection preserves frame
    /// count and order and touches exactly the ceiling count.
    #[test]
    fn keyframe_and_infection_structure(t in 1usize..40, rho_pct in 0usize..=100, seed in 0u64..200) {
        let frames: Vec<ImageTensor> = (0..t)
            .map(|i| ImageTensor::new(seeded_pixels(6, 6, seed ^ i as u64)).unwrap())
            .collect();
        let video = VideoSample::new(frames, "c", "v").unwrap();
        let kf = extract_keyframes(&video, 10).unwrap();
        prop_assert!(kf.source_indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(kf.len() <= t.min(10));

        let patch = PatchSpec::square(
            Array3::from_elem((2, 2, 3), 1.0),
            0,
            PatchMetadata::default(),
        )
        .unwrap();
        let rho = rho_pct as f64 / 100.0;
        let adv = infect_frames(&kf, &patch, rho, seed).unwrap();
        prop_assert_eq!(adv.len(), kf.len());
        prop_assert_eq!(&adv.source_indices, &kf.source_indices);
        let changed = kf
            .frames
            .iter()
            .zip(adv.frames.iter())
            .filter(|(a, b)| a != b)
            .count();
        let expect = ((rho * kf.len() as f64).ceil() as usize).min(kf.len());
        // A patch application can only be a no-op if the patch exactly equals
        // the covered pixels, which the all-ones patch rules out.
        prop_assert_eq!(changed, expect);
    }

    /// The targeted loss is a softmax cross-entropy, hence non-negative.
    #[test]
    fn patch_loss_is_non_negative(seed in 0u64..500, b in 1usize..5, n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |rows: usize| {
            let mut m = Array2::from_shape_fn((rows, 4), |_| rng.gen::<f64>() - 0.5);
            for mut row in m.rows_mut() {
                let norm = row.dot(&row).sqrt().max(1e-9);
                row.mapv_inplace(|v| v / norm);
            }
            m
        };
        let x = make(b);
        let y = make(n);
        let target = (seed as usize) % n;
        let loss = advpatch::objectives::patch_loss(x.view(), y.view(), target, 5.0).unwrap();
        prop_assert!(loss >= 0.0, "loss {}", loss);
    }

    /// Normalized batch embeddings have unit rows for any valid input.
    #[test]
    fn embeddings_normalize_to_unit_rows(seed in 0u64..200, b in 1usize..5) {
        let enc = make_toy_encoder_with(6, 3, 8, 10.0).unwrap();
        let cfg = PreprocessConfig::toy(8);
        let inputs: Vec<_> = (0..b)
            .map(|i| {
                let img = ImageTensor::new(seeded_pixels(8, 8, seed ^ (i as u64) << 8)).unwrap();
                preprocess(&img, &cfg)
            })
            .collect();
        if let Ok(rows) = embed_images(&enc, &inputs, true) {
            for r in rows.rows() {
                prop_assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }
}
