mod common;

use camrefine::dataio::{load_response_map, read_label_png, save_response_map};
use camrefine::{LabelMap, ResponseMap};
use common::{best_miou, bundle, camrefine, goldens, run, stdout};
use tempfile::tempdir;

#[test]
fn cam_writes_the_golden_maps() {
    let dir = tempdir().unwrap();
    let out = run("cam", &[], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("cam: 4 processed, 0 failed"));
    for scene in ["two_blob", "blob_02", "blob_03", "blob_04"] {
        let (ours, _) = load_response_map(&dir.path().join(format!("maps/{scene}_0.npy"))).unwrap();
        let golden = goldens()["forward"]
            .as_array()
            .unwrap()
            .iter()
            .find(|f| f["scene"] == scene && f["model"] == "two_blob")
            .unwrap()["cams"][0]["map"]
            .as_str()
            .unwrap()
            .to_string();
        let (expected, _) = load_response_map(&bundle().join(golden)).unwrap();
        let diff = ours.data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(diff < 1e-4, "{scene}: {diff}");
    }
    for f in ["failures.json", "config.toml", "digests.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn empty_list_succeeds_with_nothing_processed() {
    let dir = tempdir().unwrap();
    let list = dir.path().join("empty.txt");
    std::fs::write(&list, "").unwrap();
    let out = camrefine(&["cam", "--list", list.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("0 processed"));
}

#[test]
fn bad_model_path_fails_without_outputs() {
    let dir = tempdir().unwrap();
    let ds = common::dataset_args();
    let mut args = vec!["cam"];
    args.extend(ds.iter().map(String::as_str));
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_camrefine"))
        .args(&args)
        .args(["--model", "/does/not/exist.onnx", "--images"])
        .arg(bundle().join("images"))
        .arg("--out")
        .arg(dir.path().join("bad"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn single_pass_without_split_equals_cam() {
    let dir = tempdir().unwrap();
    assert!(run("cam", &[], &dir.path().join("cam")).status.success());
    assert!(run("infer", &["--max-iterations", "1", "--no-split"], &dir.path().join("inf")).status.success());
    for scene in ["two_blob", "blob_02", "blob_03", "blob_04"] {
        let name = format!("maps/{scene}_0.npy");
        let (a, _) = load_response_map(&dir.path().join("cam").join(&name)).unwrap();
        let (b, _) = load_response_map(&dir.path().join("inf").join(&name)).unwrap();
        assert_eq!(a.data(), b.data(), "{scene}");
    }
    let trace = std::fs::read_to_string(dir.path().join("inf/traces/two_blob.json")).unwrap();
    let trace: serde_json::Value = serde_json::from_str(&trace).unwrap();
    let patches = trace[0]["patches"].as_array().unwrap();
    assert_eq!(patches.len(), 1);
    assert_eq!(patches[0]["trace"]["records"].as_array().unwrap().len(), 1);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = tempdir().unwrap();
    assert!(run("infer", &["--workers", "1"], &dir.path().join("w1")).status.success());
    assert!(run("infer", &["--workers", "8"], &dir.path().join("w8")).status.success());
    let a = std::fs::read(dir.path().join("w1/digests.txt")).unwrap();
    let b = std::fs::read(dir.path().join("w8/digests.txt")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn perfect_maps_evaluate_to_one() {
    let dir = tempdir().unwrap();
    let maps = dir.path().join("maps");
    std::fs::create_dir(&maps).unwrap();
    for scene in ["two_blob", "blob_02", "blob_03", "blob_04"] {
        let gt = read_label_png(&bundle().join(format!("dataset/labels/{scene}.png"))).unwrap();
        let data = gt.data().iter().map(|&l| if l == 1 { 1.0 } else { 0.0 }).collect();
        let m = ResponseMap::new(0, gt.height(), gt.width(), data).unwrap();
        save_response_map(&m, &maps.join(format!("{scene}_0.npy")), "test").unwrap();
    }
    let out = run("eval", &["--maps", maps.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(0));
    let report = common::read_report(&dir.path().join("out/report.toml"));
    assert_eq!(report["best_miou"].as_float(), Some(1.0));
    assert_eq!(report["activated_recall"].as_float(), Some(1.0));
    let csv = std::fs::read_to_string(dir.path().join("out/curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 20);
}

#[test]
fn mismatched_map_is_a_partial_failure() {
    let dir = tempdir().unwrap();
    assert!(run("cam", &[], &dir.path().join("cam")).status.success());
    let maps = dir.path().join("cam/maps");
    let small = ResponseMap::zeros(0, 8, 8);
    save_response_map(&small, &maps.join("blob_03_0.npy"), "test").unwrap();
    let out = run("eval", &["--maps", maps.to_str().unwrap()], &dir.path().join("eval"));
    assert_eq!(out.status.code(), Some(3));
    assert!(stdout(&out).contains("3 processed, 1 failed"));
    let failures = std::fs::read_to_string(dir.path().join("eval/failures.json")).unwrap();
    assert!(failures.contains("blob_03"));
}

#[test]
fn pseudo_labels_from_the_report_reproduce_its_score() {
    let dir = tempdir().unwrap();
    assert!(run("infer", &[], &dir.path().join("inf")).status.success());
    let maps = dir.path().join("inf/maps");
    let report = dir.path().join("eval/report.toml");
    assert!(run("eval", &["--maps", maps.to_str().unwrap()], &dir.path().join("eval")).status.success());
    let out = run(
        "pseudo",
        &["--maps", maps.to_str().unwrap(), "--from-report", report.to_str().unwrap()],
        &dir.path().join("pseudo"),
    );
    assert!(out.status.success());

    // label k + 1 becomes a hard map for class k, so the sweep reproduces the labels at any threshold
    let hard = dir.path().join("hard");
    std::fs::create_dir(&hard).unwrap();
    for scene in ["two_blob", "blob_02", "blob_03", "blob_04"] {
        let labels: LabelMap = read_label_png(&dir.path().join(format!("pseudo/pseudo/{scene}.png"))).unwrap();
        let data = labels.data().iter().map(|&l| if l == 1 { 1.0 } else { 0.0 }).collect();
        let m = ResponseMap::new(0, labels.height(), labels.width(), data).unwrap();
        save_response_map(&m, &hard.join(format!("{scene}_0.npy")), "test").unwrap();
    }
    assert!(run("eval", &["--maps", hard.to_str().unwrap()], &dir.path().join("again")).status.success());
    let recorded = best_miou(&report);
    let again = best_miou(&dir.path().join("again/report.toml"));
    assert!((recorded - again).abs() < 1e-12, "{recorded} vs {again}");
}

#[test]
fn loss_check_passes() {
    let dir = tempdir().unwrap();
    let out = camrefine(&["loss-check", "--seed", "7"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("max relative gradient error"));
}

#[test]
fn overlays_match_image_size() {
    let dir = tempdir().unwrap();
    assert!(run("cam", &[], &dir.path().join("cam")).status.success());
    let maps = dir.path().join("cam/maps");
    let out = run("overlay", &["--maps", maps.to_str().unwrap(), "--class", "0"], &dir.path().join("ov"));
    assert!(out.status.success());
    let img = image::open(dir.path().join("ov/overlay/blob_03_0.png")).unwrap();
    assert_eq!((img.width(), img.height()), (160, 96));
}
