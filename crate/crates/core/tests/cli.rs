use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mcmot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcmot")).args(args).output().unwrap()
}

fn weights() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("assets/desk_model.json")
        .display()
        .to_string()
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = mcmot(&["simulate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
    assert_eq!(mcmot(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn help_and_version_exit_zero() {
    let out = mcmot(&["--help"]);
    assert!(out.status.success());
    let help = String::from_utf8_lossy(&out.stdout);
    for cmd in ["simulate", "track", "train", "eval-det", "eval-mot", "gradcheck", "enhance", "compare-motion"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
    assert!(mcmot(&["--version"]).status.success());
}

#[test]
fn missing_inputs_fail_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.json");
    let out = out.to_str().unwrap();
    let r = mcmot(&["eval-mot", "--gt", "/nonexistent/gt.jsonl", "--pred", "/nonexistent/p.jsonl", "--out", out]);
    assert_eq!(r.status.code(), Some(1));
    assert!(error_json(&r)["error"]["message"].as_str().unwrap().len() > 0);

    let r = mcmot(&["track", "--detections", "/nonexistent/d.jsonl", "--rig", "/nonexistent/rig.json", "--weights", &weights(), "--out", out]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(error_json(&r)["error"]["kind"], "pipeline");

    let r = mcmot(&["simulate"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn bad_config_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"dropout_per_camera": 1.5}"#).unwrap();
    let r = mcmot(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    std::fs::write(&cfg, "{ not json").unwrap();
    let r = mcmot(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert_eq!(error_json(&r)["error"]["kind"], "config");
}

#[test]
fn gradcheck_reports_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    let r = mcmot(&["gradcheck", "--seed", "2", "--out", out.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).starts_with("max relative error"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert!(report["max_relative_error"].as_f64().unwrap() < 1e-4);
    assert!(report["checked"].as_u64().unwrap() > 0);
}

#[test]
fn simulate_track_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    std::fs::write(
        d.join("scene.json"),
        r#"{"n_objects": 6, "n_frames": 40, "noise": {"center": 0.0, "yaw": 0.0, "size": 0.0}, "feature_noise": 0.0, "dropout_per_camera": 0.2, "dropout_overlap_only": true, "seed": 21}"#,
    )
    .unwrap();
    let r = mcmot(&["simulate", "--config", &p("scene.json"), "--out", &p("sim")]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let summary: Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(summary["frames"], 40);
    for f in ["detections.jsonl", "gt.jsonl", "rig.json", "scenario.json"] {
        assert!(d.join("sim").join(f).exists(), "{f}");
    }

    let r = mcmot(&[
        "track",
        "--detections",
        &p("sim/detections.jsonl"),
        "--rig",
        &p("sim/rig.json"),
        "--weights",
        &weights(),
        "--scenario",
        &p("sim/scenario.json"),
        "--enhanced-out",
        &p("enhanced.jsonl"),
        "--out",
        &p("tracks.jsonl"),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let first: Value = serde_json::from_str(std::fs::read_to_string(p("tracks.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    for key in ["frame", "track_id", "center", "size", "yaw", "class", "score", "cameras"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let r = mcmot(&["eval-mot", "--gt", &p("sim/gt.jsonl"), "--pred", &p("tracks.jsonl"), "--out", &p("mot.json")]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let mot: Value = serde_json::from_str(&std::fs::read_to_string(p("mot.json")).unwrap()).unwrap();
    assert!(mot["metrics"]["MOTA"].as_f64().unwrap() > 0.9, "{mot}");
    assert!(mot["metrics"].get("AMOTA").is_some());

    let eval_det = |pred: &str, out: &str| {
        let r = mcmot(&["eval-det", "--gt", &p("sim/gt.jsonl"), "--pred", &p(pred), "--out", &p(out)]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let v: Value = serde_json::from_str(&std::fs::read_to_string(p(out)).unwrap()).unwrap();
        v["metrics"]["recall"].as_f64().unwrap()
    };
    let raw = eval_det("sim/detections.jsonl", "raw.json");
    let enhanced = eval_det("enhanced.jsonl", "enhanced.json");
    assert!(enhanced > raw, "recall {raw} -> {enhanced}");
}

#[test]
fn train_writes_model_and_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("train.json"),
        r#"{"gtn": {"d_z": 8, "ffn_hidden": 8}, "steps": 4, "chunks": 2, "scenario": {"n_objects": 3, "n_frames": 10}}"#,
    )
    .unwrap();
    let model = d.join("m.json");
    let r = mcmot(&["train", "--config", d.join("train.json").to_str().unwrap(), "--out", model.to_str().unwrap()]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(mcmot::gtn::Gtn::load(&model).is_ok());
    let csv = std::fs::read_to_string(d.join("m.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn compare_motion_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("motion.md");
    std::fs::write(dir.path().join("scene.json"), r#"{"motion": "turning", "n_objects": 4, "n_frames": 20, "seed": 3}"#).unwrap();
    let r = mcmot(&[
        "compare-motion",
        "--config",
        dir.path().join("scene.json").to_str().unwrap(),
        "--weights",
        &weights(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let table = std::fs::read_to_string(out).unwrap();
    assert!(table.contains("| GTN decoder |") && table.contains("| Kalman |"));
}
