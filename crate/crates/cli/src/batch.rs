//! Running a command over dataset entries and recording what came out.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use camrefine::dataio::{load_dataset, DatasetEntry, DatasetIndex, DatasetRoots, LoadReport};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::{EXIT_OK, EXIT_PARTIAL};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Failure {
    pub id: String,
    pub error: String,
}

pub fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .context("starting worker pool")
}

pub fn dataset(cfg: &RunConfig, vocabulary: &[String], with_classes: bool) -> Result<(DatasetIndex, LoadReport)> {
    let list = cfg.dataset.list.as_ref().context("no dataset list given (--list)")?;
    let roots = DatasetRoots {
        images: cfg.dataset.images.clone().context("no image directory given (--images)")?,
        labels: cfg.dataset.labels.clone(),
        saliency: cfg.dataset.saliency.clone(),
        classes: if with_classes { cfg.dataset.classes.clone() } else { None },
    };
    Ok(load_dataset(list, &roots, vocabulary)?)
}

/// Applies `f` to every entry on the pool. Results come back in entry order.
pub fn map_entries<T: Send>(
    pool: &rayon::ThreadPool,
    entries: &[DatasetEntry],
    f: impl Fn(&DatasetEntry) -> Result<T> + Sync,
) -> (Vec<(String, T)>, Vec<Failure>) {
    let results: Vec<(String, Result<T>)> = pool.install(|| entries.par_iter().map(|e| (e.id.clone(), f(e))).collect());
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(v) => ok.push((id, v)),
            Err(e) => {
                log::warn!("{id}: {e:#}");
                failed.push(Failure {
                    id,
                    error: format!("{e:#}"),
                });
            }
        }
    }
    (ok, failed)
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Serialize)]
struct FailureManifest<'a> {
    command: &'a str,
    config_digest: String,
    processed: usize,
    failed: &'a [Failure],
    rejected: Vec<Failure>,
}

/// Everything a batch command wrote, for the closing manifests.
pub struct Run<'a> {
    pub command: &'a str,
    pub cfg: &'a RunConfig,
    pub written: Vec<PathBuf>,
}

impl<'a> Run<'a> {
    pub fn new(command: &'a str, cfg: &'a RunConfig) -> Self {
        Self {
            command,
            cfg,
            written: Vec::new(),
        }
    }

    /// Writes `failures.json`, `config.toml` and `digests.txt`, prints a
    /// one-line summary and picks the exit code.
    pub fn finish(mut self, processed: usize, failed: &[Failure], report: &LoadReport) -> Result<i32> {
        let out = &self.cfg.output_dir;
        create_dir(out)?;
        let rejected: Vec<Failure> = report
            .rejected
            .iter()
            .map(|(id, reason)| Failure {
                id: id.clone(),
                error: reason.clone(),
            })
            .collect();
        let manifest = FailureManifest {
            command: self.command,
            config_digest: self.cfg.digest(),
            processed,
            failed,
            rejected,
        };
        let path = out.join("failures.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);

        let path = out.join("config.toml");
        std::fs::write(&path, self.cfg.canonical()).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);

        write_digests(out, &self.written)?;
        println!(
            "{}: {processed} processed, {} failed, {} rejected",
            self.command,
            failed.len(),
            manifest.rejected.len()
        );
        Ok(if failed.is_empty() && manifest.rejected.is_empty() {
            EXIT_OK
        } else {
            EXIT_PARTIAL
        })
    }
}

/// `sha256  relative/path` per written file, sorted by path.
fn write_digests(root: &Path, files: &[PathBuf]) -> Result<()> {
    let mut lines = Vec::with_capacity(files.len());
    for f in files {
        let bytes = std::fs::read(f).with_context(|| format!("reading back {}", f.display()))?;
        let rel = f.strip_prefix(root).unwrap_or(f);
        let rel = rel.to_string_lossy().replace('\\', "/");
        lines.push(format!("{}  {rel}\n", hex(&Sha256::digest(&bytes))));
    }
    lines.sort_by(|a, b| a[66..].cmp(&b[66..]));
    let path = root.join("digests.txt");
    std::fs::write(&path, lines.concat()).with_context(|| format!("writing {}", path.display()))
}
