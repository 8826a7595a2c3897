//! CLI behavior: exit codes, config-file merging, alternate patch sources,
//! the PGD baseline, and report emission.

use std::path::Path;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["advpatch"];
    argv.extend_from_slice(args);
    advpatch_cli::run_cli(argv)
}

fn synth_data(dir: &Path, classes: usize) -> String {
    let data = dir.join("data").to_str().unwrap().to_string();
    assert_eq!(
        run(&[
            "synth", "--out", &data, "--classes", &classes.to_string(), "--per-class", "6",
            "--side", "48", "--seed", "0", "--videos", "1", "--video-frames", "12",
        ]),
        0
    );
    data
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["eval", "--bogus-flag"]), 2);
    // Missing required argument resolved from neither flag nor config.
    assert_eq!(run(&["train", "--target", "cake"]), 2);
    // Conflicting patch sources.
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path(), 4);
    assert_eq!(
        run(&[
            "eval", "--patch", "x.pa", "--text", "cake", "--area", "0.4", "--data", &data,
            "--out", "r.jsonl",
        ]),
        2
    );
}

#[test]
fn missing_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path(), 4);
    let out = dir.path().join("p.pa").to_str().unwrap().to_string();
    assert_eq!(
        run(&["train", "--model", "vit-l-14", "--data", &data, "--target", "cake", "--out", &out]),
        3
    );
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
    assert_eq!(run(&["train", "--help"]), 0);
}

#[test]
fn config_file_supplies_and_cli_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path(), 4);
    let out = dir.path().join("from_config.pa");
    let cfg = dir.path().join("train.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "model": "toy-aligned-d8-s0",
            "data": data,
            "target": "cake",
            "size": 16,
            "epochs": 1,
            "batch-size": 4,
            "seed": 1,
            "out": out,
        })
        .to_string(),
    )
    .unwrap();
    // Everything from the config file.
    assert_eq!(run(&["train", "--config", cfg.to_str().unwrap()]), 0);
    assert!(out.is_file());

    // CLI flags override config values.
    let out2 = dir.path().join("override.pa");
    assert_eq!(
        run(&[
            "train", "--config", cfg.to_str().unwrap(),
            "--out", out2.to_str().unwrap(), "--epochs", "2",
        ]),
        0
    );
    let artifact = advpatch::artifact::load_patch(&out2).unwrap();
    assert_eq!(artifact.train_config.unwrap().epochs, 2);

    // Unknown config keys are usage errors.
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"no-such-flag": 1}"#).unwrap();
    assert_eq!(run(&["train", "--config", bad.to_str().unwrap()]), 2);
}

#[test]
fn text_and_control_patch_sources_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path(), 4);
    let out = dir.path().join("text.jsonl");
    assert_eq!(
        run(&[
            "eval", "--text", "cake", "--area", "0.5", "--target", "cake",
            "--model", "toy-aligned-d8-s0", "--data", &data,
            "--repeats", "2", "--seed", "3", "--out", out.to_str().unwrap(),
        ]),
        0
    );
    let records = advpatch::report::read_records_jsonl(&out).unwrap();
    assert!(!records.is_empty());

    // A control patch cut from a real image file.
    let control_src = dir.path().join("control.png");
    advpatch::image::ImageTensor::from_fn(40, 40, |r, c, _| ((r + c) % 9) as f64 / 9.0)
        .unwrap()
        .save_png(&control_src)
        .unwrap();
    let out2 = dir.path().join("control.jsonl");
    assert_eq!(
        run(&[
            "eval", "--patch-image", control_src.to_str().unwrap(), "--size", "16",
            "--target", "cake", "--model", "toy-aligned-d8-s0", "--data", &data,
            "--repeats", "2", "--seed", "3", "--out", out2.to_str().unwrap(),
        ]),
        0
    );
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("control.summary.json")).unwrap(),
    )
    .unwrap();
    let asr1 = summary["asr"]["1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&asr1));
}

#[test]
fn frame_patch_trains_and_evaluates_with_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path(), 4);
    let patch = dir.path().join("frame.pa").to_str().unwrap().to_string();
    let ckpt = dir.path().join("ckpt").to_str().unwrap().to_string();
    assert_eq!(
        run(&[
            "train", "--model", "toy-aligned-d8-s0", "--data", &data, "--target", "cake",
            "--shape", "frame", "--frame-width", "3", "--epochs", "2", "--batch-size", "4",
            "--seed", "2", "--out", &patch, "--checkpoint-dir", &ckpt,
        ]),
        0
    );
    assert!(dir.path().join("ckpt/epoch_000.pa").is_file());
    assert!(dir.path().join("ckpt/epoch_001.pa").is_file());
    let art = advpatch::artifact::load_patch(&patch).unwrap();
    assert!(matches!(
        art.spec.kind,
        advpatch::PatchKind::Frame { width: 3 }
    ));
    let out = dir.path().join("frame.jsonl").to_str().unwrap().to_string();
    assert_eq!(
        run(&["eval", "--patch", &patch, "--data", &data, "--repeats", "2", "--seed", "5", "--out", &out]),
        0
    );
    let records = advpatch::report::read_records_jsonl(&out).unwrap();
    assert!(!records.is_empty());
}

#[test]
fn pgd_baseline_attacks_the_toy_backend() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path(), 6);
    let out = dir.path().join("pgd.jsonl");
    assert_eq!(
        run(&[
            "baseline-pgd", "--model", "toy-aligned-d8-s0", "--data", &data,
            "--target", "cake", "--eps", "0.15", "--alpha", "0.03", "--steps", "10",
            "--out", out.to_str().unwrap(),
        ]),
        0
    );
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("pgd.summary.json")).unwrap(),
    )
    .unwrap();
    let asr1 = summary["asr"]["1"].as_f64().unwrap();
    let flip = summary["flip_rate"].as_f64().unwrap();
    assert!(asr1 >= 0.5, "PGD ASR@1 {asr1} unexpectedly weak");
    assert!((0.0..=1.0).contains(&flip));
}

#[test]
fn full_video_and_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_data(dir.path(), 4);
    let patch = dir.path().join("p.pa").to_str().unwrap().to_string();
    assert_eq!(
        run(&[
            "train", "--model", "toy-aligned-d8-s0", "--data", &data, "--target", "cake",
            "--size", "24", "--epochs", "2", "--batch-size", "4", "--seed", "2",
            "--out", &patch,
        ]),
        0
    );
    let results = dir.path().join("results.jsonl").to_str().unwrap().to_string();
    assert_eq!(
        run(&["eval", "--patch", &patch, "--data", &data, "--seed", "4", "--out", &results]),
        0
    );

    let videos = format!("{data}-videos/videos");
    let captions = format!("{data}-videos/captions.json");
    let curve = dir.path().join("curve.json").to_str().unwrap().to_string();
    assert_eq!(
        run(&[
            "attack-video", "--patch", &patch, "--videos", &videos, "--captions", &captions,
            "--fractions", "0,0.5,1", "--seed", "6", "--out", &curve,
        ]),
        0
    );
    let parsed: Vec<advpatch::video::CurvePoint> =
        serde_json::from_str(&std::fs::read_to_string(&curve).unwrap()).unwrap();
    assert_eq!(parsed.len(), 3);
    for p in &parsed {
        assert!((0.0..=1.0).contains(&p.asr_1_4));
        assert!((0.0..=1.0).contains(&p.asr_1_2));
    }
    // With every keyframe infected, a trained patch should win the s1 > s4
    // comparison on most videos; assert it beats the untouched level.
    assert!(parsed[2].asr_1_4 >= parsed[0].asr_1_4);

    let report = dir.path().join("report").to_str().unwrap().to_string();
    let history = dir.path().join("p.history.json").to_str().unwrap().to_string();
    assert_eq!(
        run(&[
            "report", "--in", &results, "--curve", &curve, "--history", &history,
            "--out", &report,
        ]),
        0
    );
    for file in ["summary.csv", "asr_bars.svg", "curve.svg", "curve.csv", "loss.svg"] {
        assert!(
            dir.path().join("report").join(file).is_file(),
            "missing report file {file}"
        );
    }
    // Reports must be recomputable from the records alone: the CSV ASR@1
    // matches a recount.
    let records = advpatch::report::read_records_jsonl(&results).unwrap();
    let recount = advpatch::evaluation::asr(&records, 1).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report/summary.csv")).unwrap();
    let line = csv.lines().nth(1).unwrap();
    let asr1: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(asr1, recount);
}
