use std::path::Path;
use std::process::{Command, Output};

use focuslab::image::read_pgm;
use serde_json::Value;

fn focuslab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focuslab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn focuslab")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_writes_frame_of_scene_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f.pgm");
    let o = focuslab(&[
        "--seed",
        "3",
        "--out",
        path(&out),
        "synth",
        "--z",
        "1500",
        "--z0",
        "1300",
        "--size",
        "512",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_pgm(&out).unwrap().dims(), (512, 512));
}

#[test]
fn oracle_autofocus_reports_trajectory_and_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("af.json");
    let o = focuslab(&[
        "--out",
        path(&out),
        "autofocus",
        "--oracle",
        "--z0",
        "1640",
        "--size",
        "512",
        "--start",
        "1100,2000",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!lines.is_empty());
    let results: Vec<Value> =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(results.len(), 2);
    for r in &results {
        assert!(r["error"].as_f64().unwrap() <= 20.0);
        assert!(r["result"]["time_steps"].as_u64().unwrap() <= 3);
    }
}

#[test]
fn allinfocus_writes_stack_and_fusion() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = focuslab(&[
        "--out",
        path(&out),
        "allinfocus",
        "--oracle",
        "--bands",
        "2",
        "--size",
        "640",
        "--start",
        "1050",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let frames = summary["frames"].as_u64().unwrap() as usize;
    assert!((1..=3).contains(&frames));
    for t in 0..frames {
        for stem in ["frame", "mask", "activation"] {
            assert!(out.join(format!("{stem}_{t:03}.pgm")).is_file());
        }
        assert!(out.join(format!("deviation_{t:03}.json")).is_file());
    }
    assert_eq!(read_pgm(&out.join("fused.pgm")).unwrap().dims(), (640, 640));
    let traj = std::fs::read_to_string(out.join("trajectory.jsonl")).unwrap();
    assert_eq!(traj.lines().count(), frames);
}

#[test]
fn simulated_calibration_writes_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("model.json");
    let o = focuslab(&[
        "--out",
        path(&out),
        "calibrate",
        "--z0",
        "1500",
        "--zi",
        "1450,1500,1550",
        "--r-max",
        "4",
        "--alpha-lo",
        "0.99",
        "--alpha-hi",
        "1.01",
        "--outer",
        "128",
        "--target-size",
        "192",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = focuslab::defocus::DefocusModel::load(&out).unwrap();
    let (r, alpha) = m.lookup(1500.0, 1500.0).unwrap();
    assert_eq!(r, 0.0);
    assert!((alpha - 1.0).abs() < 1e-9);
}

#[test]
fn tiny_training_run_writes_weights_and_losses() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("disc.bin");
    let o = focuslab(&[
        "--out",
        path(&out),
        "train",
        "--kind",
        "discriminator",
        "--n",
        "8",
        "--epochs",
        "2",
        "--textures",
        "2",
        "--texture-size",
        "768",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let w = focuslab::nn::load_weights(&out).unwrap();
    assert_eq!(w.param_count(), 791);
    let losses = std::fs::read_to_string(out.with_extension("losses.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);
}

#[test]
fn timeit_prints_all_components() {
    let o = focuslab(&["timeit", "--reps", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    for name in ["traditional", "estimator", "discriminator", "proposed"] {
        assert!(
            text.lines().any(|l| l.starts_with(name)),
            "missing {name} in {text}"
        );
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = focuslab(&["autofocus", "--size", "512"]);
    assert_eq!(o.status.code(), Some(2));
    let o = focuslab(&[
        "--out",
        path(&dir.path().join("m.json")),
        "calibrate",
        "--frames",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = focuslab(&["autofocus", "--oracle", "--start", "900"]);
    assert_eq!(o.status.code(), Some(2));
    let o = focuslab(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}
