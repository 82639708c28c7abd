use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use shiftssd::data::{dataset, read_detections};
use shiftssd::harness::RunManifest;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftssd"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_writes_scene_pairs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["gen", "--scenes", "8", "--out", "d/", "--seed", "7", "--preset", "small"], tmp.path());
    let names: Vec<String> = fs::read_dir(tmp.path().join("d"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".bin")).count(), 8);
    assert_eq!(names.iter().filter(|n| n.ends_with(".json") && *n != "manifest.json").count(), 8);
    let m = manifest(&tmp.path().join("d/manifest.json"));
    assert_eq!((m.subcommand.as_str(), m.seed, m.status.as_str()), ("gen", 7, "ok"));
    assert_eq!(m.outputs.len(), 16);
    assert_eq!(m.config["synth"]["points"], 224);
    assert_eq!(dataset(&tmp.path().join("d"), None).unwrap().len(), 8);
}

#[test]
fn outputs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for dir in ["a", "b"] {
        ok(&["gen", "--scenes", "2", "--out", dir, "--seed", "3", "--preset", "small"], d);
        let ckpt = format!("{dir}.ckpt");
        ok(&["train", "--data", dir, "--out", &ckpt, "--epochs", "3", "--seed", "3", "--preset", "small"], d);
        ok(&["detect", "--model", &ckpt, "--in", dir, "--out", &format!("{dir}.jsonl"), "--seed", "3", "--set", "model.score_threshold=0.0"], d);
    }
    for f in ["scene_0000.bin", "scene_0001.json"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap());
    }
    assert_eq!(fs::read(d.join("a.ckpt")).unwrap(), fs::read(d.join("b.ckpt")).unwrap());
    assert_eq!(fs::read(d.join("a.jsonl")).unwrap(), fs::read(d.join("b.jsonl")).unwrap());
    let dets = read_detections(&d.join("a.jsonl")).unwrap();
    assert!(!dets.is_empty());
    assert!(dets.iter().all(|r| r.scene_id.starts_with("scene_000")));
}

#[test]
fn detect_on_single_cloud_writes_jsonl() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["gen", "--scenes", "1", "--out", "d", "--seed", "1", "--preset", "small"], d);
    ok(&["train", "--data", "d", "--out", "m.ckpt", "--epochs", "1", "--seed", "1", "--preset", "small"], d);
    ok(&["detect", "--model", "m.ckpt", "--in", "d/scene_0000.bin", "--out", "det.jsonl", "--seed", "1", "--score-threshold", "0"], d);
    let text = fs::read_to_string(d.join("det.jsonl")).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["scene_id", "class_id", "score", "center", "size", "yaw"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
        assert_eq!(v["scene_id"], "scene_0000");
    }
    let m = manifest(&d.join("det.jsonl.manifest.json"));
    assert_eq!(m.config["model"]["score_threshold"], 0.0);
}

#[test]
fn config_precedence_is_flags_then_file_then_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["gen", "--scenes", "1", "--out", "d", "--seed", "2", "--preset", "small"], d);
    fs::write(d.join("cfg.json"), r#"{ "train": { "epochs": 2, "peak_lr": 0.005 }, "model": { "nms_iou": 0.4 } }"#).unwrap();
    ok(&["train", "--data", "d", "--out", "m.ckpt", "--config", "cfg.json", "--lr", "0.002", "--seed", "2", "--preset", "small"], d);
    let m = manifest(&d.join("m.ckpt.manifest.json"));
    assert_eq!(m.config["train"]["epochs"], 2);
    assert_eq!(m.config["train"]["peak_lr"], 0.002);
    assert_eq!(m.config["train"]["pct_start"], 0.4);
    assert_eq!(m.config["model"]["nms_iou"], 0.4);
    assert_eq!(m.config["train"]["seed"], 2);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["gen", "--scenes", "2", "--out", "d", "--seed", "1", "--bogus"][..],
        &["gen", "--scenes", "2", "--out", "d"][..],
        &["frobnicate", "--seed", "1"][..],
        &["probe", "--out", "p.json", "--seed", "1"][..],
    ] {
        let out = run(args, tmp.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    assert_eq!(run(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", "missing", "--out", "m.ckpt", "--seed", "1"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let m = manifest(&tmp.path().join("m.ckpt.manifest.json"));
    assert_eq!(m.status, "failed");
    assert!(m.error.unwrap().contains("missing"));

    fs::write(tmp.path().join("bad.json"), "{ not json").unwrap();
    let out = run(&["gen", "--scenes", "1", "--out", "d", "--config", "bad.json", "--seed", "1"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["gen", "--scenes", "1", "--out", "d", "--set", "synth.nope=1", "--seed", "1"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn probe_bench_and_ablate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["gen", "--scenes", "1", "--out", "d", "--seed", "5", "--preset", "small"], d);
    let text = ok(&["probe", "--in", "d/scene_0000.bin", "--out", "p.json", "--seed", "5", "--preset", "small"], d);
    assert!(text.contains("reach violations"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("p.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["sa_reach_violations"], 0);
    assert_eq!(report["scenes"][0]["ssa"]["clusters"].as_array().unwrap().len(), 16);

    ok(&["bench", "--scenes", "1", "--repetitions", "10", "--warmup", "1", "--out", "b.csv", "--seed", "5", "--preset", "small"], d);
    let csv = fs::read_to_string(d.join("b.csv")).unwrap();
    assert!(csv.starts_with("variant,mean_ms,median_ms,params,repetitions"));
    assert_eq!(csv.lines().count(), 3);
    let out = run(&["bench", "--repetitions", "5", "--out", "b2.csv", "--seed", "5", "--preset", "small"], d);
    assert_eq!(out.status.code(), Some(2));

    ok(&["ablate", "--data", "d", "--axis", "exchange", "--epochs", "1", "--out", "a.csv", "--seed", "5", "--preset", "small"], d);
    let csv = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(manifest(&d.join("a.csv.manifest.json")).outputs.iter().any(|p| p.ends_with("a.csv")));
}

#[test]
fn gradcheck_reports_worst_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&["gradcheck", "--seed", "1", "--out", "g.json"], tmp.path());
    let worst = text.lines().find_map(|l| l.strip_prefix("worst relative error ")).unwrap();
    assert!(worst.parse::<f64>().unwrap() < 1e-4);
    let m = manifest(&tmp.path().join("g.json.manifest.json"));
    assert_eq!(m.status, "ok");
}
