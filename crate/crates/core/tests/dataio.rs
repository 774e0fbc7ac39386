mod common;

use std::path::PathBuf;

use camrefine::dataio::{
    load_dataset, load_response_map, read_label_png, read_npy, read_saliency_png, save_dataset, save_response_map,
    write_label_png, write_npy, write_saliency_png, DatasetRoots,
};
use camrefine::{normalize, Error, LabelMap, ResponseMap, SaliencyMap, IGNORE};
use common::bundle;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn label_png_round_trips_and_keeps_ignore() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.png");
    let values: Vec<u8> = (0..6 * 7).map(|i| if i % 5 == 0 { IGNORE } else { (i % 21) as u8 }).collect();
    let map = LabelMap::new(6, 7, values).unwrap();
    write_label_png(&map, &path).unwrap();
    assert_eq!(read_label_png(&path).unwrap(), map);
}

#[test]
fn label_index_outside_the_vocabulary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.png");
    let mut values = vec![0u8; 16];
    values[9] = 37;
    write_label_png(&LabelMap::new(4, 4, values).unwrap(), &path).unwrap();
    let err = read_label_png(&path).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert!(err.to_string().contains("37"));
}

#[test]
fn saliency_ramp_reads_back_as_value_over_255() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.png");
    let ramp: Vec<f32> = (0..256).map(|i| i as f32 / 255.0).collect();
    write_saliency_png(&SaliencyMap::new(16, 16, ramp).unwrap(), &path).unwrap();
    let back = read_saliency_png(&path).unwrap();
    for (i, &v) in back.data().iter().enumerate() {
        assert_eq!(v, i as f32 / 255.0);
    }
}

#[test]
fn npy_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.npy");
    let values: Vec<f32> = (0..35).map(|i| (i as f32 * 0.731).sin().abs()).collect();
    write_npy(&path, 5, 7, &values).unwrap();
    let (h, w, back) = read_npy(&path).unwrap();
    assert_eq!((h, w), (5, 7));
    assert_eq!(back, values);
}

#[test]
fn truncated_npy_is_a_corrupt_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.npy");
    write_npy(&path, 4, 4, &[0.5; 16]).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    for cut in [5, 40, bytes.len() - 3] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(read_npy(&path), Err(Error::CorruptHeader { .. })), "cut at {cut}");
    }
}

#[test]
fn numpy_written_file_reads_exactly() {
    let (h, w, values) = read_npy(&data("numpy_ramp.npy")).unwrap();
    assert_eq!((h, w), (3, 5));
    for (i, &v) in values.iter().enumerate() {
        assert_eq!(v, i as f32 / 7.0);
    }
}

#[test]
fn response_map_and_sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x_3.npy");
    let map = normalize(&ResponseMap::new(3, 2, 3, vec![0.0, 2.0, 1.0, 4.0, 0.5, 3.0]).unwrap()).unwrap();
    save_response_map(&map, &path, "abc123").unwrap();
    let (back, meta) = load_response_map(&path).unwrap();
    assert_eq!(back, map);
    assert_eq!(meta.config_digest, "abc123");
    assert_eq!(meta.class_id, 3);
}

#[test]
fn missing_sidecar_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lonely.npy");
    write_npy(&path, 1, 1, &[1.0]).unwrap();
    assert!(matches!(load_response_map(&path), Err(Error::MissingFile(_))));
}

fn vocabulary() -> Vec<String> {
    vec!["blob".into(), "sky".into()]
}

fn fixture_roots() -> DatasetRoots {
    let b = bundle();
    DatasetRoots {
        images: b.join("images"),
        labels: Some(b.join("dataset/labels")),
        saliency: Some(b.join("dataset/saliency")),
        classes: Some(b.join("dataset/classes.txt")),
    }
}

#[test]
fn fixture_dataset_round_trips() {
    let (index, report) = load_dataset(&bundle().join("dataset/list.txt"), &fixture_roots(), &vocabulary()).unwrap();
    assert!(report.rejected.is_empty());
    let ids: Vec<&str> = index.entries.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, vec!["blob_02", "blob_03", "blob_04", "two_blob"]);
    assert!(index.entries.iter().all(|e| e.classes.as_deref() == Some(&[0][..])));

    let dir = tempfile::tempdir().unwrap();
    let (list, classes) = (dir.path().join("list.txt"), dir.path().join("classes.txt"));
    save_dataset(&index, &list, &classes, &vocabulary()).unwrap();
    let roots = DatasetRoots {
        classes: Some(classes),
        ..fixture_roots()
    };
    let (again, _) = load_dataset(&list, &roots, &vocabulary()).unwrap();
    assert_eq!(again, index);
}

#[test]
fn dataset_rejects_missing_files_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let list = dir.path().join("list.txt");
    std::fs::write(&list, "two_blob\nghost\ntwo_blob\nchecker16\n").unwrap();
    let (index, report) = load_dataset(&list, &fixture_roots(), &vocabulary()).unwrap();
    assert_eq!(index.entries.len(), 1);
    let reasons: Vec<&str> = report.rejected.iter().map(|(id, _)| id.as_str()).collect();
    // checker16 has an image but no label
    assert_eq!(reasons, vec!["checker16", "ghost", "two_blob"]);
}

#[test]
fn unknown_class_names_fail_the_load() {
    let dir = tempfile::tempdir().unwrap();
    let classes = dir.path().join("classes.txt");
    std::fs::write(&classes, "two_blob unicorn\n").unwrap();
    let roots = DatasetRoots {
        classes: Some(classes),
        ..fixture_roots()
    };
    let err = load_dataset(&bundle().join("dataset/list.txt"), &roots, &vocabulary()).unwrap_err();
    assert!(matches!(err, Error::UnknownClass(ref n) if n == "unicorn"));
}
