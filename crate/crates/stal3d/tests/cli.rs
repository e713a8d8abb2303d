//! End-to-end tests of the command-line interface.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> PathBuf {
    // Integration tests sit next to the binary under target/<profile>/.
    let mut path = std::env::current_exe().unwrap();
    path.pop();
    path.pop();
    path.join(format!("stal3d{}", std::env::consts::EXE_SUFFIX))
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(name)
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary launches")
}

fn dir_digest(dir: &Path) -> Vec<(String, u64)> {
    // Name plus FNV hash of contents for every file, sorted by name.
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let bytes = std::fs::read(&path).unwrap();
            let mut h = 0xcbf29ce484222325u64;
            for b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            out.push((path.strip_prefix(dir).unwrap().display().to_string(), h));
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_deterministic_and_loadable() {
    let base = std::env::temp_dir().join("stal3d_cli_gen");
    let _ = std::fs::remove_dir_all(&base);
    for tag in ["a", "b"] {
        let out = run(&[
            "gen",
            "--spec",
            preset("size_density_shift.json").to_str().unwrap(),
            "--out",
            base.join(tag).to_str().unwrap(),
            "--seed",
            "7",
            "--n-source",
            "6",
            "--n-target",
            "4",
        ]);
        assert!(out.status.success(), "gen failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(
        dir_digest(&base.join("a")),
        dir_digest(&base.join("b")),
        "identical gen invocations must produce identical directories"
    );
    let data = stal3d::simworld::load_dir(&base.join("a/target"), stal3d::simworld::LabelMode::Load).unwrap();
    assert_eq!(data.len(), 4);
}

#[test]
fn adapt_zero_rounds_round_trips_checkpoint() {
    let base = std::env::temp_dir().join("stal3d_cli_rounds0");
    let _ = std::fs::remove_dir_all(&base);
    let gen = run(&[
        "gen",
        "--spec",
        preset("control.json").to_str().unwrap(),
        "--out",
        base.join("data").to_str().unwrap(),
        "--seed",
        "3",
        "--n-source",
        "4",
        "--n-target",
        "4",
    ]);
    assert!(gen.status.success());

    let cfg = base.join("run.json");
    std::fs::write(
        &cfg,
        r#"{"detector": {"grid": {"cells": 8, "range_m": 16.0},
            "anchors": [
              {"l": 4.0, "w": 1.8, "h": 1.6, "z": 0.8, "pos_iou": 0.6, "neg_iou": 0.45},
              {"l": 0.9, "w": 0.8, "h": 1.7, "z": 0.85, "pos_iou": 0.5, "neg_iou": 0.35},
              {"l": 1.8, "w": 0.7, "h": 1.5, "z": 0.75, "pos_iou": 0.5, "neg_iou": 0.35}],
            "n_dir": 2, "channels": 8},
           "pretrain_epochs": 1, "seed": 2}"#,
    )
    .unwrap();
    let pre = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--source",
        base.join("data/source").to_str().unwrap(),
        "--out",
        base.join("pre").to_str().unwrap(),
    ]);
    assert!(pre.status.success(), "{}", String::from_utf8_lossy(&pre.stderr));

    let ad = run(&[
        "adapt",
        "--config",
        cfg.to_str().unwrap(),
        "--source",
        base.join("data/source").to_str().unwrap(),
        "--target",
        base.join("data/target").to_str().unwrap(),
        "--init",
        base.join("pre/checkpoint.ckpt").to_str().unwrap(),
        "--out",
        base.join("ad").to_str().unwrap(),
        "--rounds",
        "0",
    ]);
    assert!(ad.status.success(), "{}", String::from_utf8_lossy(&ad.stderr));
    assert_eq!(
        std::fs::read(base.join("pre/checkpoint.ckpt")).unwrap(),
        std::fs::read(base.join("ad/checkpoint.ckpt")).unwrap(),
        "adapt --rounds 0 must hand back the input checkpoint byte-identically"
    );
}

#[test]
fn config_errors_exit_with_code_2() {
    let base = std::env::temp_dir().join("stal3d_cli_badcfg");
    let _ = std::fs::remove_dir_all(&base);
    std::fs::create_dir_all(&base).unwrap();
    let cfg = base.join("bad.json");
    std::fs::write(&cfg, r#"{"phi": 2.5}"#).unwrap();
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--source",
        base.join("nowhere").to_str().unwrap(),
        "--out",
        base.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "config errors must exit 2");
}

#[test]
fn report_renders_closed_gap_fixture() {
    let base = std::env::temp_dir().join("stal3d_cli_report");
    let _ = std::fs::remove_dir_all(&base);
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/closed_gap_reference.json");
    let out = run(&[
        "report",
        "--closed-gap-fixture",
        fixture.to_str().unwrap(),
        "--out",
        base.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = std::fs::read_to_string(base.join("closed_gap.md")).unwrap();
    assert!(md.contains("+131.68%"));
    assert!(md.contains("lyft_to_kitti_rain"));
}
