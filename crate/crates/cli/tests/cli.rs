//! End-to-end checks of the `dualmode` binary: output contracts, exit
//! codes, and byte-stable reports.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualmode"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dualmode-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn encode_reports_reference_token_count_and_zero_diff() {
    let out_dir = tmp("encode");
    let out = run(&[
        "encode",
        "--mode",
        "standby",
        "--frames",
        "64",
        "--n-llm",
        "8",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("visual_tokens = 512"), "{text}");
    assert!(text.contains("focus_vs_base_max_abs_diff = 0"), "{text}");
    assert!(out_dir.join("report.txt").exists());
    assert!(out_dir.join("tokens.csv").exists());
    assert!(out_dir.join("manifest.txt").exists());
    std::fs::remove_dir_all(&out_dir).ok();
}

#[test]
fn invalid_mode_is_a_usage_error() {
    let out = run(&["encode", "--mode", "sleepy"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_stage1_audits_frozen_params_and_is_deterministic() {
    let dir_a = tmp("train-a");
    let dir_b = tmp("train-b");
    for dir in [&dir_a, &dir_b] {
        let out = run(&[
            "train",
            "--stage",
            "1",
            "--steps",
            "8",
            "--seed",
            "3",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        assert!(stdout(&out).contains("original params changed: 0"));
    }
    let csv_a = std::fs::read(dir_a.join("loss.csv")).unwrap();
    let csv_b = std::fs::read(dir_b.join("loss.csv")).unwrap();
    assert_eq!(csv_a, csv_b, "same seed must give byte-identical loss curves");
    std::fs::remove_dir_all(&dir_a).ok();
    std::fs::remove_dir_all(&dir_b).ok();
}

#[test]
fn train_stage2_needs_init_and_averages_losses() {
    let no_init = run(&["train", "--stage", "2", "--steps", "1"]);
    assert_eq!(no_init.status.code(), Some(1));

    let dir1 = tmp("stage1-for-2");
    assert!(run(&[
        "train",
        "--stage",
        "1",
        "--steps",
        "4",
        "--out",
        dir1.to_str().unwrap()
    ])
    .status
    .success());

    let dir2 = tmp("stage2");
    let ckpt = dir1.join("stage1.ckpt");
    let out = run(&[
        "train",
        "--stage",
        "2",
        "--steps",
        "4",
        "--lr",
        "0.02",
        "--init",
        ckpt.to_str().unwrap(),
        "--out",
        dir2.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let csv = std::fs::read_to_string(dir2.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,loss1,loss2,combined");
    for line in lines {
        let cols: Vec<f64> = line.split(',').skip(1).map(|v| v.parse().unwrap()).collect();
        assert!((cols[2] - 0.5 * (cols[0] + cols[1])).abs() <= 1e-12, "{line}");
    }
    std::fs::remove_dir_all(&dir1).ok();
    std::fs::remove_dir_all(&dir2).ok();
}

#[test]
fn stream_sim_prints_plan_presets_and_handles_zero_frames() {
    let dir = tmp("sim");
    let out = run(&["stream-sim", "--frames", "30", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("baseline_seconds = 50.6"), "{text}");
    assert!(text.contains("focus_seconds = 6.2"), "{text}");
    assert!(text.contains("bank_minutes = 29.9"), "{text}");
    for total in ["total=3200", "total=5248", "total=9344"] {
        assert!(text.contains(total), "{text}");
    }
    let log = std::fs::read_to_string(dir.join("events.log")).unwrap();
    assert!(log.lines().count() >= 30);

    let empty_dir = tmp("sim-empty");
    let empty = run(&["stream-sim", "--frames", "0", "--out", empty_dir.to_str().unwrap()]);
    assert!(empty.status.success());
    assert_eq!(std::fs::read_to_string(empty_dir.join("events.log")).unwrap(), "");
    std::fs::remove_dir_all(&dir).ok();
    std::fs::remove_dir_all(&empty_dir).ok();
}

#[test]
fn prune_retains_a_multiple_of_four_tokens_and_exports_maps() {
    let dir = tmp("prune");
    let out = run(&["prune", "--m-percent", "50", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    let tokens: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("retained_tokens = "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(tokens % 4, 0);
    assert!(dir.join("groups.csv").exists());
    assert!(dir.join("attn_token0.csv").exists());
    let pgm = std::fs::read(dir.join("attn_token0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn cost_prints_scaling_ratios() {
    let dir = tmp("cost");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/table7.cfg");
    let out = run(&[
        "cost",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("encoder_flops_ratio = 2"), "{text}");
    assert!(text.contains("lm_prefill_ratio_2x_len = 2.88"), "{text}");
    assert!(dir.join("cost.json").exists());
    assert!(dir.join("cost.csv").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn soup_of_identical_checkpoints_is_identity() {
    let train_dir = tmp("soup-train");
    assert!(run(&[
        "train",
        "--stage",
        "1",
        "--steps",
        "2",
        "--out",
        train_dir.to_str().unwrap()
    ])
    .status
    .success());
    let ckpt = train_dir.join("stage1.ckpt");

    let soup_dir = tmp("soup-out");
    let out = run(&[
        "soup",
        "--a",
        ckpt.to_str().unwrap(),
        "--b",
        ckpt.to_str().unwrap(),
        "--w",
        "0.5",
        "--out",
        soup_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    let original = std::fs::read(&ckpt).unwrap();
    let souped = std::fs::read(soup_dir.join("soup.ckpt")).unwrap();
    assert_eq!(original, souped, "soup of identical checkpoints must be byte-identical");
    std::fs::remove_dir_all(&train_dir).ok();
    std::fs::remove_dir_all(&soup_dir).ok();
}
