use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn irisnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irisnas"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = irisnas(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny corpus: 4 subjects x 5 images, normalized with templates.
fn corpus(dir: &Path) -> std::path::PathBuf {
    let raw = dir.join("raw");
    let norm = dir.join("norm");
    ok(&["synth-data", "--out", s(&raw), "--identities", "4", "--per-identity", "5", "--seed", "3"]);
    ok(&[
        "preprocess",
        "--manifest",
        s(&raw.join("manifest.csv")),
        "--truth",
        s(&raw.join("truth.json")),
        "--out",
        s(&norm),
        "--templates",
    ]);
    norm
}

#[test]
fn end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let norm = corpus(dir.path());
    let manifest = norm.join("manifest.csv");
    let arch = dir.path().join("arch.json");
    let trace = dir.path().join("trace.csv");
    let out = ok(&[
        "search", "--manifest", s(&manifest), "--budget-flops", "500000", "--epochs", "2",
        "--out", s(&arch), "--trace", s(&trace),
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,expected_flops,expected_params");
    assert_eq!(lines.len(), 3);
    assert_eq!(fs::read_to_string(&trace).unwrap(), out);
    assert!(fs::read_to_string(&arch).unwrap().contains("\"edges\""));

    let cost = ok(&["cost", "--arch", s(&arch), "--out-dim", "4"]);
    let total: f64 = cost.lines().last().unwrap().split('\t').nth(2).unwrap().parse().unwrap();
    assert!(total <= 500000.0, "{cost}");

    let model = dir.path().join("model");
    let out = ok(&["train", "--manifest", s(&manifest), "--arch", s(&arch), "--epochs", "2", "--out", s(&model)]);
    assert!(out.starts_with("epoch,lr,train_loss\n"));
    for f in ["weights.irnw", "labels.json", "model.json", "trace.csv"] {
        assert!(model.join(f).exists(), "{f}");
    }

    let roc = dir.path().join("roc.csv");
    let out = ok(&["eval", "--model", s(&model), "--manifest", s(&manifest), "--roc", s(&roc)]);
    assert!(out.starts_with("eer,"), "{out}");
    assert!(out.contains("\nfrr_at_far,"));
    assert!(fs::read_to_string(&roc).unwrap().starts_with("threshold,far,frr\n"));

    // Same subject scores lower than a different subject.
    let t = norm.join("templates");
    let hd = |a: &str, b: &str| -> f64 {
        let out = ok(&["match", s(&t.join(a)), s(&t.join(b))]);
        let mut l = out.lines();
        assert_eq!(l.next(), Some("hd,best_shift,valid_bits"));
        l.next().unwrap().split(',').next().unwrap().parse().unwrap()
    };
    assert!(hd("images_0000_00.bin", "images_0000_01.bin") < hd("images_0000_00.bin", "images_0001_01.bin"));
    let out = ok(&["eval", "--templates", s(&norm.join("templates.csv"))]);
    assert!(out.starts_with("eer,"), "{out}");
}

#[test]
fn eval_separable_scores() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scores.csv");
    fs::write(&p, "label,score\ngenuine,0.1\ngenuine,0.2\nimpostor,0.8\nimpostor,0.9\n").unwrap();
    let out = ok(&["eval", "--scores", s(&p)]);
    assert_eq!(out.lines().next(), Some("eer,0.0"));
    assert_eq!(out.lines().nth(1), Some("frr_at_far,0.0"));
}

#[test]
fn infeasible_budget_fails() {
    let dir = tempfile::tempdir().unwrap();
    let norm = corpus(dir.path());
    let out = irisnas(&[
        "search", "--manifest", s(&norm.join("manifest.csv")), "--budget-flops", "1",
        "--out", s(&dir.path().join("a.json")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("infeasible"), "{err}");
    assert!(!dir.path().join("a.json").exists());
}

#[test]
fn bad_invocations_fail() {
    assert!(!irisnas(&["frobnicate"]).status.success());
    assert!(!irisnas(&["eval"]).status.success());
    assert!(!irisnas(&["eval", "--scores", "/nonexistent/scores.csv"]).status.success());
    assert!(!irisnas(&["search", "--loss", "hinge", "--manifest", "m.csv", "--out", "a.json"]).status.success());
}

#[test]
fn config_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let norm = corpus(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"seed": 5, "manifest": {:?}, "search": {{"epochs": 1, "budget-flops": 400000}}}}"#,
            s(&norm.join("manifest.csv"))
        ),
    )
    .unwrap();
    let a = dir.path().join("a.json");
    let out = ok(&["--config", s(&cfg), "search", "--out", s(&a)]);
    assert_eq!(out.lines().count(), 2);
    let out = ok(&["search", "--config", s(&cfg), "--epochs", "2", "--out", s(&a)]);
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn search_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let norm = corpus(dir.path());
    let m = norm.join("manifest.csv");
    let run = |name: &str, seed: &str| {
        let a = dir.path().join(name);
        let trace = ok(&["search", "--manifest", s(&m), "--epochs", "2", "--seed", seed, "--out", s(&a)]);
        (trace, fs::read(&a).unwrap())
    };
    let first = run("a.json", "7");
    assert_eq!(first, run("b.json", "7"));
    assert_ne!(first.0, run("c.json", "8").0);
}

#[test]
fn preprocess_segments_without_truth() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    ok(&["synth-data", "--out", s(&raw), "--identities", "2", "--per-identity", "2"]);
    let norm = dir.path().join("norm");
    ok(&["preprocess", "--manifest", s(&raw.join("manifest.csv")), "--out", s(&norm)]);
    let text = fs::read_to_string(norm.join("manifest.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(norm.join("segmentation.json").exists());
}
