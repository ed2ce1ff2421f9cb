use std::path::Path;
use std::process::{Command, Output};

fn dualphase(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualphase"))
        .current_dir(dir)
        .env_remove("DUALPHASE_REPORT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TINY: &[&str] = &[
    "--set", "scene.width=64",
    "--set", "scene.height=64",
    "--set", "detector.input_width=64",
    "--set", "detector.input_height=64",
    "--set", "detector.backbone_widths=[4,4,4,4,4]",
    "--set", "detector.rpn_channels=4",
    "--set", "detector.fc_width=8",
    "--set", "detector.epochs=1",
    "--set", "classifier.input_width=16",
    "--set", "classifier.input_height=16",
    "--set", "classifier.conv_widths=[4,4]",
    "--set", "classifier.hidden=8",
    "--set", "classifier.epochs=1",
    "--set", "derivation.crop_width=30",
    "--set", "derivation.crop_height=25",
    "--set", "eval.k=2",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

#[test]
fn kfold_two_hundred_by_five() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualphase(dir.path(), &["kfold", "--n", "200", "--k", "5", "--seed", "1"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("sizes 40/40/40/40/40"));
    let r = json(&dir.path().join("reports/kfold.json"));
    assert_eq!(r["schema_version"], "v1");
    assert_eq!(r["fold_sizes"], serde_json::json!([40, 40, 40, 40, 40]));
    assert_eq!(r["config"]["eval"]["k"], 5);
}

#[test]
fn report_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dualphase"))
        .current_dir(dir.path())
        .env("DUALPHASE_REPORT_DIR", "elsewhere")
        .args(["kfold", "--n", "10"])
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("elsewhere/kfold.json").exists());
    assert!(!dir.path().join("reports").exists());
}

#[test]
fn exit_code_categories() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dualphase(dir.path(), &["kfold", "--n", "10", "--set", "detector.lr_typo=1"]);
    assert_eq!(bad.status.code(), Some(2));
    let missing = dualphase(dir.path(), &["eval-detector", "--manifest", "nope.jsonl", "--checkpoint", "gone.dpck"]);
    assert_eq!(missing.status.code(), Some(3));
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.contains("nope.jsonl") && err.contains("gone.dpck"), "{err}");
}

#[test]
fn pipeline_eval_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    ok(&dualphase(dir.path(), &with_tiny(&["synth-gen", "--out", "data", "--n", "8"])));
    ok(&dualphase(dir.path(), &with_tiny(&["pipeline-eval", "--manifest", "data/manifests/dataset.jsonl"])));
    let r = json(&dir.path().join("reports/pipeline-eval.json"));
    assert_eq!(r["schema_version"], "v1");
    assert_eq!(r["command"], "pipeline-eval");
    assert_eq!(r["config"]["detector"]["input_width"], 64);
    assert!(r["detection"]["map"]["mean"].is_number());
    for side in ["dual_phase", "single_phase"] {
        let folds = r[side]["folds"].as_array().unwrap();
        assert_eq!(folds.len(), 2);
        assert!(folds.iter().all(|f| f["accuracy"].is_number()));
        assert!(r[side]["accuracy"]["mean"].is_number());
        assert!(r[side]["accuracy"]["std"].is_number());
    }
    assert!(r["margin_pp"].is_number());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path().join("reports"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn staged_workflow_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| ok(&dualphase(dir.path(), &with_tiny(args)));
    run(&["synth-gen", "--out", "data", "--n", "6"]);
    run(&["train-detector", "--manifest", "data/manifests/dataset.jsonl", "--out", "ck/det.dpck"]);
    run(&["eval-detector", "--manifest", "data/manifests/dataset.jsonl", "--checkpoint", "ck/det.dpck"]);
    let first = std::fs::read(dir.path().join("reports/eval-detector.json")).unwrap();
    run(&["derive", "--manifest", "data/manifests/dataset.jsonl", "--checkpoint", "ck/det.dpck", "--out", "derived"]);
    let derive = json(&dir.path().join("reports/derive.json"));
    assert_eq!(derive["source_images"], 6);
    run(&["train-classifier", "--baseline", "single-phase", "--manifest", "data/manifests/dataset.jsonl", "--out", "ck/base.dpck"]);
    run(&["eval-classifier", "--baseline", "single-phase", "--manifest", "data/manifests/dataset.jsonl", "--checkpoint", "ck/base.dpck"]);
    run(&["pipeline-run", "--detector", "ck/det.dpck", "--classifier", "ck/base.dpck", "data/images/img_0000.ppm"]);
    let pr = json(&dir.path().join("reports/pipeline-run.json"));
    assert!(pr["images"][0]["results"].as_array().unwrap().len() <= 2);

    run(&["train-detector", "--manifest", "data/manifests/dataset.jsonl", "--out", "ck/det2.dpck"]);
    run(&["eval-detector", "--manifest", "data/manifests/dataset.jsonl", "--checkpoint", "ck/det2.dpck"]);
    let second = std::fs::read(dir.path().join("reports/eval-detector.json")).unwrap();
    assert_eq!(first, second);
    assert_eq!(std::fs::read(dir.path().join("ck/det.dpck")).unwrap(), std::fs::read(dir.path().join("ck/det2.dpck")).unwrap());
}
