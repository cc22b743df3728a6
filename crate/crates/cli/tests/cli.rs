use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vstain(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vstain"));
    cmd.args(args).arg("--out").arg(out).env_remove("VSTAIN_OUT");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("spawn vstain")
}

fn ok_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn err_json(o: &Output) -> Value {
    assert!(!o.status.success());
    serde_json::from_slice(&o.stderr).expect("stderr is JSON")
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = "
[synth]
num_stains = 2
slides = 1
eval_slides = 1
width = 128
height = 128

[train]
num_stains = 2
batch_size = 1

[schedule]
iterations = 3
log_every = 1
";

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nlearning_rate = 0.1\n");
    let o = vstain(&["synth"], Some(&cfg), dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(err_json(&o)["error"], "config");
}

#[test]
fn missing_config_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vstain(&["synth"], Some(&dir.path().join("absent.toml")), dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(err_json(&o)["error"], "io");
}

#[test]
fn bad_arguments_report_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = vstain(&["paint"], None, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(err_json(&o)["error"], "usage");
}

#[test]
fn stain_without_model_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = vstain(&["stain"], None, dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn synth_train_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let s = ok_json(&vstain(&["synth", "--seed", "4"], Some(&cfg), &out));
    assert_eq!(s["summary"]["stains"], serde_json::json!(["cd3", "cd8"]));
    assert!(out.join("data/train_000_cd8.tif").exists());

    let t = ok_json(&vstain(&["train", "--seed", "4"], Some(&cfg), &out));
    assert_eq!(t["summary"]["iterations"], 3);
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    // two stain steps and the H&E step per iteration
    assert_eq!(log.lines().count(), 9);

    let e = ok_json(&vstain(&["eval"], Some(&cfg), &out));
    let report = &e["summary"];
    assert_eq!(report["stains"].as_array().unwrap().len(), 2);
    let mse = report["overall_mse_e2"]["mean"].as_f64().unwrap();
    assert!(mse.is_finite() && mse >= 0.0);
    assert!(out.join("eval_report.json").exists());

    let q = ok_json(&vstain(&["qc", "--stains", "cd8"], Some(&cfg), &out));
    assert_eq!(q["summary"]["discriminator_files"], 1);
    assert!(out.join("qc/eval_000_cd8_heatmap.png").exists());
    assert!(out.join("stained/train_000_cd8.tif").exists());

    let he = vstain_core::io::read_slide(&out.join("data/eval_000_he.tif")).unwrap();
    let crop = he.base().crop_clamped(5, 7, 100, 90);
    let png = dir.path().join("crop.png");
    vstain_core::io::write_png(&png, &crop).unwrap();
    let s = ok_json(&vstain(&["stain", "--stains", "cd3", "--overlap", "0.3", "--input", png.to_str().unwrap()], Some(&cfg), &out));
    assert_eq!(s["summary"]["slides"].as_array().unwrap().len(), 1);
    let stained = vstain_core::io::read_slide(&out.join("stained/crop_cd3.tif")).unwrap();
    assert_eq!((stained.width(), stained.height()), (100, 90));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok_json(&vstain(&["synth", "--seed", "11"], Some(&cfg), &a));
    ok_json(&vstain(&["synth", "--seed", "11"], Some(&cfg), &b));
    for name in ["train_000_he.tif", "train_000_cd3.tif", "eval_000_cd8.tif", "specs.json"] {
        assert_eq!(std::fs::read(a.join("data").join(name)).unwrap(), std::fs::read(b.join("data").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn staining_two_of_eight_opens_three_generator_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[synth]\nnum_stains = 8\nslides = 1\neval_slides = 0\nwidth = 64\nheight = 64\n\
         [train]\nnum_stains = 8\nbatch_size = 1\n[schedule]\niterations = 1\n",
    );
    let out = dir.path().join("run");
    ok_json(&vstain(&["synth"], Some(&cfg), &out));
    ok_json(&vstain(&["train"], Some(&cfg), &out));

    let s = ok_json(&vstain(&["stain", "--stains", "cd8,ki67"], Some(&cfg), &out));
    assert_eq!(s["summary"]["generator_side_files"], 3);
    assert_eq!(s["summary"]["discriminator_files"], 0);
    assert_eq!(s["summary"]["files_opened"].as_array().unwrap().len(), 3);

    let s = ok_json(&vstain(&["stain", "--stains", "cd8,ki67", "--qc"], Some(&cfg), &out));
    assert_eq!(s["summary"]["generator_side_files"], 3);
    assert_eq!(s["summary"]["discriminator_files"], 2);

    let o = vstain(&["stain", "--stains", "cd99"], Some(&cfg), &out);
    assert_eq!(o.status.code(), Some(2));
}
