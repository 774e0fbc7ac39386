#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bundle() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../fixtures/bundle")
}

pub fn goldens() -> serde_json::Value {
    let text = std::fs::read_to_string(bundle().join("goldens.json")).expect("committed golden bundle");
    serde_json::from_str(&text).unwrap()
}

/// Runs the binary with the fixture model and dataset roots filled in.
pub fn camrefine(args: &[&str], out: &Path) -> Output {
    let b = bundle();
    let output = Command::new(env!("CARGO_BIN_EXE_camrefine"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--model")
        .arg(b.join("models/two_blob.onnx"))
        .arg("--images")
        .arg(b.join("images"))
        .output()
        .expect("binary runs");
    if !output.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&output.stderr));
    }
    output
}

pub fn dataset_args() -> Vec<String> {
    let b = bundle();
    vec![
        "--list".into(),
        b.join("dataset/list.txt").display().to_string(),
        "--classes".into(),
        b.join("dataset/classes.txt").display().to_string(),
        "--labels".into(),
        b.join("dataset/labels").display().to_string(),
    ]
}

pub fn run(command: &str, extra: &[&str], out: &Path) -> Output {
    let ds = dataset_args();
    let mut args: Vec<&str> = vec![command];
    args.extend(ds.iter().map(String::as_str));
    args.extend(extra);
    camrefine(&args, out)
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn read_report(path: &Path) -> toml::Value {
    toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn best_miou(report: &Path) -> f64 {
    read_report(report)["best_miou"].as_float().unwrap()
}
