use std::path::Path;
use std::process::{Command, Output};

use afformer::harness::RunConfig;

fn afformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afformer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn afformer")
}

fn ok(args: &[&str]) -> String {
    let out = afformer(args);
    assert!(
        out.status.success(),
        "afformer {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(line: &str) -> serde_json::Value {
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("{line:?}: {e}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_flows() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let manifest = ok(&["gen-corpus", "--n", "4", "--size", "32", "--seed", "5", "--out", s(&corpus)]);
    let manifest = manifest.trim();
    assert!(Path::new(manifest).exists());

    let config = root.join("run.toml");
    RunConfig {
        iterations: 3,
        batch_size: 2,
        ..RunConfig::tiny()
    }
    .save(&config)
    .unwrap();

    let run = root.join("run");
    let ckpt = ok(&["train", "--config", s(&config), "--data", manifest, "--out", s(&run)]);
    let ckpt = ckpt.trim();
    assert_eq!(std::fs::read_to_string(run.join("trace.jsonl")).unwrap().lines().count(), 3);

    let report = root.join("eval.jsonl");
    let line = ok(&["eval", "--ckpt", ckpt, "--data", manifest, "--res", "28x28", "--report", s(&report)]);
    let v = json(&line);
    assert!(v["kld"].as_f64().unwrap() >= 0.0);
    assert!(v["action_accuracy"].is_number());
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), 5);

    // the supervised model has an action head, so zero-shot refuses it
    let out = afformer(&["zeroshot", "--ckpt", ckpt, "--data", manifest]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("action head"));

    let out = afformer(&["eval", "--ckpt", ckpt, "--data", manifest, "--res", "64x64"]);
    assert!(!out.status.success());

    let gt = corpus.join("heatmaps/sample_00000.npy");
    let v = json(&ok(&["score", "--gt", s(&gt), "--pred", s(&gt)]));
    assert!(v["kld"].as_f64().unwrap().abs() < 1e-9);
    assert!((v["sim"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((v["auc_j"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let ann = corpus.join("annotations/sample_00000.json");
    let v = json(&ok(&["score", "--gt", s(&gt), "--pred", s(&gt), "--res", "16x16", "--points", s(&ann)]));
    assert!(v["auc_j"].as_f64().unwrap() > 0.9);

    let synth = root.join("synth");
    let synth_manifest = ok(&[
        "synth",
        "--frames",
        s(&corpus.join("clips/sample_00000")),
        "--detections",
        s(&corpus.join("detections/sample_00000.jsonl")),
        "--out",
        s(&synth),
        "--clip-len",
        "8",
        "--stride",
        "4",
        "--seed",
        "3",
    ]);
    let synth_manifest = synth_manifest.trim();
    let records = std::fs::read_to_string(synth_manifest).unwrap();
    assert!(records.lines().count() >= 1);

    let pre = root.join("pre");
    let pre_ckpt = ok(&["pretrain", "--config", s(&config), "--synth-manifest", synth_manifest, "--out", s(&pre)]);
    let v = json(&ok(&["zeroshot", "--ckpt", pre_ckpt.trim(), "--data", manifest]));
    assert_eq!(v["res"], "32x32");
    assert!(v["center_bias"]["kld"].is_number());

    let ft = root.join("ft");
    ok(&["train", "--config", s(&config), "--data", manifest, "--out", s(&ft), "--init", pre_ckpt.trim()]);
}

#[test]
fn rejects_bad_arguments() {
    assert!(!afformer(&["eval", "--ckpt", "x", "--data", "y", "--res", "28"]).status.success());
    assert!(!afformer(&["score", "--gt", "/nonexistent.npy", "--pred", "/nonexistent.npy"]).status.success());
    assert!(!afformer(&["frobnicate"]).status.success());
}
