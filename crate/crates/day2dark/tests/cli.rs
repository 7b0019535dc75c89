//! End-to-end exercise of the command-line surface: generate a miniature
//! dataset, audit it, train both stages, evaluate, re-plot and run a sweep.

use std::path::{Path, PathBuf};
use std::process::Command;

use day2dark::encoders::EncoderConfig;
use day2dark::pipeline::TrainConfig;
use day2dark::recognizer::RecognizerConfig;
use day2dark::toybench::BenchConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_day2dark")
}

fn run(args: &[&str]) -> String {
    let output = Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        output.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn run_expect_failure(args: &[&str]) -> String {
    let output = Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        !output.status.success(),
        "command {args:?} unexpectedly succeeded"
    );
    String::from_utf8_lossy(&output.stderr).into_owned()
}

fn mini_bench() -> BenchConfig {
    BenchConfig {
        n_classes: 3,
        clips_per_class: 8,
        val_clips_per_class: 1,
        test_clips_per_class: 3,
        dark_fraction_train: 0.1,
        dark_fraction_test: 0.5,
        unlabeled_pool_size: 6,
        frames: 4,
        height: 8,
        width: 8,
        seed: 21,
        ..BenchConfig::default()
    }
}

fn mini_train() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs_stage1: 2,
        epochs_stage2: 1,
        autoencoder_epochs: 10,
        seed: 21,
        recognizer: RecognizerConfig {
            k: 2,
            prompt_len: 3,
            d_in: 16,
            probe_layers: 1,
            fusion_layers: 1,
            heads: 2,
            mlp_ratio: 2,
            n_classes: 3,
            encoder: EncoderConfig {
                patch_t: 2,
                patch_h: 4,
                patch_w: 4,
                d_v: 8,
                visual_hidden: 8,
                d_a: 8,
                n_bands: 8,
                time_chunks: 2,
                band_groups: 2,
                ..EncoderConfig::default()
            },
            clip_t: 4,
            clip_h: 8,
            clip_w: 8,
            ..RecognizerConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn workdir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("d2d_cli_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_cli_round_trip() {
    let dir = workdir();
    let data = dir.join("data");
    let runs = dir.join("runs");
    let bench_json = dir.join("bench.json");
    let train_json = dir.join("train.json");
    std::fs::write(
        &bench_json,
        serde_json::to_string_pretty(&mini_bench()).unwrap(),
    )
    .unwrap();
    std::fs::write(&train_json, mini_train().to_json()).unwrap();

    // gen-data
    let out = run(&[
        "gen-data",
        "--config",
        path_str(&bench_json),
        "--out",
        path_str(&data),
    ]);
    assert!(out.contains("24 train"), "{out}");
    assert!(data.join("manifest").exists());
    assert!(data
        .join("train")
        .join("train_00000")
        .join("frames.bin")
        .exists());

    // audit
    let audit_dir = dir.join("audit");
    run(&[
        "audit",
        "--data",
        path_str(&data),
        "--t",
        "40",
        "--out",
        path_str(&audit_dir),
    ]);
    let csv = std::fs::read_to_string(audit_dir.join("audit.csv")).unwrap();
    // Header plus one row per clip across all four splits.
    assert_eq!(csv.lines().count(), 1 + 24 + 3 + 9 + 6);
    let report = std::fs::read_to_string(audit_dir.join("audit.txt")).unwrap();
    assert!(report.contains("threshold t = 40"));

    // train stage 1 then stage 2 from its checkpoint
    run(&[
        "train",
        "--stage",
        "1",
        "--config",
        path_str(&train_json),
        "--data",
        path_str(&data),
        "--out",
        path_str(&runs),
    ]);
    let stage1 = runs.join("stage1.ckpt");
    assert!(stage1.exists());
    assert!(runs.join("stage1_log.csv").exists());
    assert!(runs.join("pseudo_targets.bin").exists());
    run(&[
        "train",
        "--stage",
        "2",
        "--config",
        path_str(&train_json),
        "--data",
        path_str(&data),
        "--out",
        path_str(&runs),
        "--ckpt",
        path_str(&stage1),
    ]);
    let stage2 = runs.join("stage2.ckpt");
    assert!(stage2.exists());

    // the end-to-end mode also runs (own directory: it records its own config)
    let runs_e2e = dir.join("runs_e2e");
    run(&[
        "train",
        "--stage",
        "e2e",
        "--config",
        path_str(&train_json),
        "--data",
        path_str(&data),
        "--out",
        path_str(&runs_e2e),
    ]);
    assert!(runs_e2e.join("e2e.ckpt").exists());

    // eval emits a report with a valid plot
    let report_dir = dir.join("report");
    let out = run(&[
        "eval",
        "--ckpt",
        path_str(&stage2),
        "--data",
        path_str(&data),
        "--split",
        "test",
        "--out",
        path_str(&report_dir),
    ]);
    assert!(out.contains("top1_accuracy"), "{out}");
    let png = std::fs::read(report_dir.join("binned_metric.png")).unwrap();
    day2dark::png::validate(&png).unwrap();
    let bins_before = std::fs::read(report_dir.join("bins.csv")).unwrap();

    // plot regenerates images from the CSV without changing it
    run(&["plot", "--report", path_str(&report_dir)]);
    let bins_after = std::fs::read(report_dir.join("bins.csv")).unwrap();
    assert_eq!(bins_before, bins_after);
    day2dark::png::validate(&std::fs::read(report_dir.join("binned_metric.png")).unwrap()).unwrap();

    // a wrong checkpoint/config pairing is rejected by fingerprint
    let mut other = mini_train();
    other.seed = 99;
    let other_json = dir.join("other.json");
    std::fs::write(&other_json, other.to_json()).unwrap();
    let err = run_expect_failure(&[
        "eval",
        "--ckpt",
        path_str(&stage2),
        "--config",
        path_str(&other_json),
        "--data",
        path_str(&data),
    ]);
    assert!(err.contains("fingerprint"), "{err}");

    // ablation table over the component ladder
    let ablate_dir = dir.join("ablate");
    let out = run(&[
        "ablate",
        "--axis",
        "ladder",
        "--config",
        path_str(&train_json),
        "--data",
        path_str(&data),
        "--out",
        path_str(&ablate_dir),
    ]);
    assert!(out.contains("vanilla"), "{out}");
    let table = std::fs::read_to_string(ablate_dir.join("ablation_ladder.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);

    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn unknown_commands_and_missing_flags_fail_cleanly() {
    let err = run_expect_failure(&["frobnicate"]);
    assert!(err.contains("unknown command"), "{err}");
    let err = run_expect_failure(&["gen-data"]);
    assert!(err.contains("--out"), "{err}");
    let err = run_expect_failure(&[
        "train", "--stage", "7", "--data", "/nope", "--out", "/nope2",
    ]);
    assert!(!err.is_empty());
}
