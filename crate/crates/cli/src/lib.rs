//! Command-line front end: `cam`, `infer`, `pseudo`, `eval`, `loss-check` and `overlay`.

pub mod batch;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
/// Some entries failed; the rest were written.
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "camrefine", version, about = "Refine class activation maps and evaluate pseudo labels")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// ONNX classifier.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Model manifest; defaults to the model path with a .toml extension.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Dataset id list.
    #[arg(long, global = true)]
    pub list: Option<PathBuf>,
    #[arg(long, global = true)]
    pub images: Option<PathBuf>,
    /// Directory of palette PNG ground-truth labels.
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,
    /// Directory of 8-bit saliency PNGs.
    #[arg(long, global = true)]
    pub saliency: Option<PathBuf>,
    /// Image-level class sidecar.
    #[arg(long, global = true)]
    pub classes: Option<PathBuf>,
    /// Directory of response maps to read.
    #[arg(long, global = true)]
    pub maps: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plain class activation maps for every present class.
    Cam,
    /// Split & unite with iterative erase-and-reinfer.
    Infer {
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        no_split: bool,
        #[arg(long)]
        erase_threshold: Option<f32>,
        #[arg(long)]
        stop_fraction: Option<f64>,
    },
    /// Pseudo-label PNGs at a background threshold.
    Pseudo {
        #[arg(long, conflicts_with = "from_report")]
        bg_threshold: Option<f64>,
        /// Use the best threshold recorded by `eval`.
        #[arg(long)]
        from_report: Option<PathBuf>,
    },
    /// Threshold sweep, activated recall and class-count breakdown.
    Eval,
    /// Verify the loss gradient against finite differences.
    LossCheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Blend each response map over its image.
    Overlay {
        /// Only this class.
        #[arg(long)]
        class: Option<usize>,
    },
}

/// The file configuration with every given flag applied on top.
pub fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let c = &cli.common;
    let set = |slot: &mut Option<PathBuf>, flag: &Option<PathBuf>| {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    };
    set(&mut cfg.model.path, &c.model);
    set(&mut cfg.model.manifest, &c.manifest);
    set(&mut cfg.dataset.list, &c.list);
    set(&mut cfg.dataset.images, &c.images);
    set(&mut cfg.dataset.labels, &c.labels);
    set(&mut cfg.dataset.saliency, &c.saliency);
    set(&mut cfg.dataset.classes, &c.classes);
    set(&mut cfg.maps, &c.maps);
    if let Some(out) = &c.out {
        cfg.output_dir.clone_from(out);
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    match &cli.command {
        Command::Infer {
            max_iterations,
            no_split,
            erase_threshold,
            stop_fraction,
        } => {
            if let Some(v) = max_iterations {
                cfg.refinement.max_iterations = *v;
            }
            if let Some(v) = erase_threshold {
                cfg.refinement.erase_threshold = *v;
            }
            if let Some(v) = stop_fraction {
                cfg.refinement.stop_fraction = *v;
            }
            if *no_split {
                cfg.split = false;
            }
        }
        Command::Pseudo { bg_threshold, .. } => {
            if bg_threshold.is_some() {
                cfg.bg_threshold = *bg_threshold;
            }
        }
        Command::LossCheck { seed, instances, alpha } => {
            if let Some(v) = seed {
                cfg.loss.seed = *v;
            }
            if let Some(v) = instances {
                cfg.loss.instances = *v;
            }
            if let Some(v) = alpha {
                cfg.loss.alpha = *v;
            }
        }
        Command::Cam | Command::Eval | Command::Overlay { .. } => {}
    }
    Ok(cfg)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = resolve(&cli).and_then(|cfg| match &cli.command {
        Command::Cam => commands::cam(&cfg),
        Command::Infer { .. } => commands::infer(&cfg),
        Command::Pseudo { from_report, .. } => commands::pseudo(&cfg, from_report.as_deref()),
        Command::Eval => commands::eval(&cfg),
        Command::LossCheck { .. } => commands::loss_check(&cfg),
        Command::Overlay { class } => commands::overlay(&cfg, *class),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}
