use std::path::Path;

use camrefine_fixtures::{bundle_dir, export::export, oracle, scenes};

fn files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn regenerated_bundle_matches_committed_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    export(tmp.path()).unwrap();
    let committed = bundle_dir();
    let fresh = files(tmp.path());
    assert_eq!(fresh, files(&committed), "bundle file list changed; rerun export-fixtures");
    for rel in &fresh {
        let a = std::fs::read(tmp.path().join(rel)).unwrap();
        let b = std::fs::read(committed.join(rel)).unwrap();
        assert!(a == b, "{} differs from the committed bundle", rel.display());
    }
}

#[test]
fn two_exports_are_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    export(a.path()).unwrap();
    export(b.path()).unwrap();
    for rel in files(a.path()) {
        assert_eq!(
            std::fs::read(a.path().join(&rel)).unwrap(),
            std::fs::read(b.path().join(&rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

#[test]
fn loss_goldens_pass_their_own_finite_difference_check() {
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(bundle_dir().join("goldens.json")).unwrap()).unwrap();
    let cases = json["loss"].as_array().unwrap();
    assert_eq!(cases.len(), 3);
    for case in cases {
        let check = case["self_check"].as_f64().unwrap();
        assert!(check < 1e-6, "{}: {check}", case["name"]);
    }
    let zero = cases.iter().find(|c| c["name"] == "zero_tau").unwrap();
    assert_eq!(zero["value"]["tau"].as_f64().unwrap(), 0.0);
    assert_eq!(zero["value"]["total"], zero["value"]["l_seg"]);
}

#[test]
fn weak_blob_is_hidden_until_the_strong_one_is_erased() {
    let net = camrefine_fixtures::net::two_blob();
    let scene = scenes::two_blob();
    let img = oracle::Rgb::from_scene(&scene);
    let b = scene.blob("b").unwrap();
    let inside_b = |map: &[f64]| {
        (0..map.len())
            .filter(|&i| b.contains(i / scene.width, i % scene.width))
            .map(|i| map[i])
            .fold(0.0, f64::max)
    };
    assert_eq!(inside_b(&oracle::response(&net, &img, 0)), 0.0);
    let mut erased = img.clone();
    let a = scene.blob("a").unwrap();
    for (i, px) in erased.pixels.iter_mut().enumerate() {
        if a.contains(i / scene.width, i % scene.width) {
            *px = img.mean();
        }
    }
    assert_eq!(inside_b(&oracle::response(&net, &erased, 0)), 1.0);
}

#[test]
fn one_percent_scenes_straddle_the_stop_rule() {
    let net = camrefine_fixtures::net::two_blob();
    let run = |scene: scenes::Scene| {
        let img = oracle::Rgb::from_scene(&scene);
        oracle::iterate(&net, &img, 0, img.mean())
    };
    let under = run(scenes::one_percent());
    assert_eq!(under.steps.len(), 2);
    assert!(under.stopped_early);
    let fraction = under.steps[1].newly_activated as f64 / (128.0 * 128.0);
    assert!((0.85e-2..0.95e-2).contains(&fraction), "{fraction}");

    let over = run(scenes::one_percent_plus());
    assert!(over.steps[1].newly_activated as f64 >= 0.01 * 128.0 * 128.0);
    assert!(over.steps.len() > 2);
}

#[test]
fn resize_keeps_corners_and_constants() {
    let grid = [0.0, 1.0, 2.0, 3.0];
    let out = oracle::resize(&grid, 2, 2, 5, 7);
    assert_eq!(out[0], 0.0);
    assert_eq!(out[6], 1.0);
    assert_eq!(out[28], 2.0);
    assert_eq!(out[34], 3.0);
    assert!(oracle::resize(&[0.5; 6], 2, 3, 9, 4).iter().all(|&v| (v - 0.5).abs() < 1e-15));
}
