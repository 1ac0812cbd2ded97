use std::fs;
use std::process::{Command, Output};

use rangesam::projection::ProjectionConfig;
use rangesam::synthetic::synthetic_scene;

fn rangesam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rangesam")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn config_applies_presets_then_overrides() {
    let out = rangesam(&["config", "--toy", "--synthetic", "--set", "schedule.max_steps=12", "--set", "seed=9"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let cfg: toml::Table = text.parse().unwrap();
    assert_eq!(cfg["seed"].as_integer(), Some(9));
    assert_eq!(cfg["schedule"]["max_steps"].as_integer(), Some(12));
    assert_eq!(cfg["data"]["synthetic"].as_bool(), Some(true));
    assert_eq!(cfg["projection"]["width"].as_integer(), Some(256));
}

#[test]
fn config_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    let first = stdout(&rangesam(&["config", "--toy", "--set", "model.num_classes=7"]));
    fs::write(&path, &first).unwrap();
    let second = rangesam(&["config", "--config", path.to_str().unwrap()]);
    assert!(second.status.success());
    assert_eq!(stdout(&second), first);
}

#[test]
fn bad_override_is_an_error() {
    let out = rangesam(&["config", "--set", "schedule.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn train_without_data_root_explains_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rangesam"))
        .args(["train", "--toy", "--out", dir.path().to_str().unwrap()])
        .env_remove("RANGESAM_DATA_ROOT")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("data"));
}

#[test]
fn eval_reports_missing_checkpoint() {
    let out = rangesam(&["eval", "--toy", "--synthetic", "--checkpoint", "/nonexistent/checkpoint.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn gradcheck_exit_code_reflects_injected_fault() {
    let clean = rangesam(&["gradcheck", "--no-model"]);
    assert!(clean.status.success(), "{}", stdout(&clean));
    let faulty = rangesam(&["gradcheck", "--no-model", "--inject-fault", "gelu"]);
    assert_eq!(faulty.status.code(), Some(1));
    assert!(stdout(&faulty).contains("gelu"));
}

#[test]
fn train_then_eval_on_synthetic_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let common = ["--toy", "--synthetic", "--set", "data.synthetic_scenes=2", "--set", "schedule.max_steps=2"];
    let train = rangesam(&[&["train", "--out", out_dir, "--eval-train"][..], &common].concat());
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    for f in ["checkpoint.ckpt", "train_log.jsonl", "config.toml", "train_metrics.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let metrics = dir.path().join("val.json");
    let ckpt = dir.path().join("checkpoint.ckpt");
    let eval = rangesam(&[&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--metrics", metrics.to_str().unwrap()][..], &common].concat());
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(stdout(&eval).contains("mIoU"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(metrics).unwrap()).unwrap();
    assert_eq!(json["scans"], 2);
    assert!(json["points"]["miou"].as_f64().unwrap() >= 0.0);
}

#[test]
fn project_writes_previews() {
    let dir = tempfile::tempdir().unwrap();
    let pc = synthetic_scene(3, &ProjectionConfig::with_size(16, 256));
    let scan = dir.path().join("000000.bin");
    fs::write(&scan, pc.to_bin_bytes()).unwrap();
    let out = rangesam(&["project", scan.to_str().unwrap(), "--toy", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains(&format!("{} points", pc.len())));
    let ppm = fs::read(dir.path().join("range.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n256 16\n255\n"));
}
