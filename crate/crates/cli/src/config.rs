//! Run configuration: a TOML file, overridden by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use camrefine::condinfer::RefinementConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub path: Option<PathBuf>,
    /// Defaults to the model path with a `.toml` extension.
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// One image id per line.
    pub list: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub saliency: Option<PathBuf>,
    /// `<id> <class name>...` per line.
    pub classes: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Background thresholds to sweep; 0.05 to 0.95 in steps of 0.05 when unset.
    pub thresholds: Option<Vec<f64>>,
    /// Inferred from the labels and maps when unset.
    pub foreground_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub seed: u64,
    /// Random instances per class count.
    pub instances: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            alpha: camrefine::loss::DEFAULT_ALPHA,
            seed: 0,
            instances: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Apply split & unite in `infer`.
    pub split: bool,
    /// Directory of response maps read by `pseudo`, `eval` and `overlay`.
    pub maps: Option<PathBuf>,
    pub bg_threshold: Option<f64>,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub refinement: RefinementConfig,
    pub eval: EvalSection,
    pub loss: LossSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            workers: 0,
            split: true,
            maps: None,
            bg_threshold: None,
            model: ModelSection::default(),
            dataset: DatasetSection::default(),
            refinement: RefinementConfig::default(),
            eval: EvalSection::default(),
            loss: LossSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Canonical TOML of every setting that can affect output bytes. The worker
    /// count and output directory are left out.
    pub fn canonical(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        c.output_dir = PathBuf::new();
        toml::to_string(&c).expect("config serializes")
    }

    /// SHA-256 hex of [`RunConfig::canonical`].
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        self.model
            .manifest
            .clone()
            .or_else(|| self.model.path.as_ref().map(|p| p.with_extension("toml")))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
