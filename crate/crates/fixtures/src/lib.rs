//! Fixture classifiers, synthetic scenes and golden values for the
//! `camrefine` test suites.
//!
//! The bundle under `bundle/` is committed; `export-fixtures` rewrites it and
//! the crate's tests check that a fresh export is byte-identical.

pub mod export;
pub mod io;
pub mod net;
pub mod onnx;
pub mod oracle;
pub mod scenes;

use std::path::PathBuf;

/// The committed golden bundle.
pub fn bundle_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("bundle")
}
