#![allow(dead_code)]

use std::path::PathBuf;

use camrefine::backend::{load_model, ClassifierHandle, ModelManifest};
use camrefine::dataio::read_image;
use camrefine::ImageTensor;
use serde_json::Value;

pub fn bundle() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../fixtures/bundle")
}

pub fn goldens() -> Value {
    let text = std::fs::read_to_string(bundle().join("goldens.json")).expect("committed golden bundle");
    serde_json::from_str(&text).unwrap()
}

pub fn model(name: &str) -> ClassifierHandle {
    let dir = bundle().join("models");
    let manifest = ModelManifest::from_path(&dir.join(format!("{name}.toml"))).unwrap();
    load_model(&dir.join(format!("{name}.onnx")), &manifest).unwrap()
}

pub fn image(scene: &str) -> ImageTensor {
    read_image(&bundle().join("images").join(format!("{scene}.png"))).unwrap()
}

pub fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

/// Row-major mask of a named blob in a golden scene.
pub fn blob_mask(scene: &str, blob: &str) -> Vec<bool> {
    let g = goldens();
    let s = g["scenes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["name"] == scene)
        .unwrap();
    let (h, w) = (s["height"].as_u64().unwrap() as usize, s["width"].as_u64().unwrap() as usize);
    let b = s["blobs"].as_array().unwrap().iter().find(|b| b["name"] == blob).unwrap();
    let get = |k: &str| b[k].as_u64().unwrap() as usize;
    let (top, left, bh, bw) = (get("top"), get("left"), get("height"), get("width"));
    (0..h * w)
        .map(|i| (top..top + bh).contains(&(i / w)) && (left..left + bw).contains(&(i % w)))
        .collect()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).abs()).fold(0.0, f64::max)
}
