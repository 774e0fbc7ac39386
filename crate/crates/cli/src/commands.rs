//! The subcommands. Each returns an exit code; hard errors come back as `Err`.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use camrefine::backend::{class_conditional_maps, classes_to_process, load_model, ClassifierHandle, ModelManifest};
use camrefine::condinfer::{run_pipeline, PipelineOptions};
use camrefine::dataio::{
    load_response_map, read_image, read_label_png, save_response_map, write_label_png, DatasetEntry, VOC_CLASSES,
};
use camrefine::loss::{gradient_check, total_loss, total_loss_with_tau, PredictionTensor};
use camrefine::metrics::{breakdown_by_class_count, RecallCounts};
use camrefine::pseudo::{default_thresholds, generate_pseudo_labels, sweep_dataset, SweepItem};
use camrefine::{ImageTensor, LabelMap, ResponseMap, SaliencyMap, IGNORE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{create_dir, dataset, map_entries, pool, Run};
use crate::config::RunConfig;
use crate::{EXIT_ERROR, EXIT_OK};

fn load(cfg: &RunConfig) -> Result<(ClassifierHandle, Vec<String>)> {
    let path = cfg.model.path.as_ref().context("no model given (--model)")?;
    let manifest_path = cfg.manifest_path().context("no model manifest given")?;
    let manifest = ModelManifest::from_path(&manifest_path)?;
    let handle = load_model(path, &manifest)?;
    let vocabulary = match &manifest.class_names {
        Some(names) => names.clone(),
        None if manifest.classes == VOC_CLASSES.len() => VOC_CLASSES.iter().map(|s| s.to_string()).collect(),
        None => (0..manifest.classes).map(|i| format!("class{i}")).collect(),
    };
    Ok((handle, vocabulary))
}

pub fn map_path(dir: &Path, id: &str, class_id: usize) -> PathBuf {
    dir.join(format!("{id}_{class_id}.npy"))
}

/// Maps saved for `id`, ordered by class id.
pub fn find_maps(dir: &Path, id: &str) -> Result<Vec<ResponseMap>> {
    let prefix = format!("{id}_");
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(class) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".npy")) else {
            continue;
        };
        if let Ok(class_id) = class.parse::<usize>() {
            found.push((class_id, path));
        }
    }
    found.sort();
    found
        .into_iter()
        .map(|(class_id, path)| {
            let (map, _) = load_response_map(&path)?;
            ensure!(
                map.class_id() == class_id,
                "{} holds class {} but is named for class {class_id}",
                path.display(),
                map.class_id()
            );
            Ok(map)
        })
        .collect()
}

fn present_classes(handle: &ClassifierHandle, entry: &DatasetEntry, image: &ImageTensor) -> Result<Vec<usize>> {
    let classes = classes_to_process(handle, image, entry.classes.as_deref())?;
    if let Some(&c) = classes.iter().find(|&&c| c >= handle.class_count()) {
        bail!("class {c} is outside the model's {} classes", handle.class_count());
    }
    Ok(classes)
}

fn save_maps(maps: &[ResponseMap], dir: &Path, id: &str, digest: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for m in maps {
        let path = map_path(dir, id, m.class_id());
        save_response_map(m, &path, digest)?;
        written.push(camrefine::dataio::sidecar_path(&path));
        written.push(path);
    }
    Ok(written)
}

fn model_batch(
    command: &str,
    cfg: &RunConfig,
    per_entry: impl Fn(&ClassifierHandle, &DatasetEntry, &ImageTensor, &[usize], &Path) -> Result<Vec<PathBuf>> + Sync,
) -> Result<i32> {
    cfg.refinement.validate()?;
    let (handle, vocabulary) = load(cfg)?;
    let (index, report) = dataset(cfg, &vocabulary, true)?;
    let pool = pool(cfg)?;
    let maps_dir = cfg.output_dir.join("maps");
    create_dir(&maps_dir)?;
    let (ok, failed) = map_entries(&pool, &index.entries, |entry| {
        let image = read_image(&entry.image)?;
        let classes = present_classes(&handle, entry, &image)?;
        if classes.is_empty() {
            log::info!("{}: no class present", entry.id);
            return Ok(Vec::new());
        }
        per_entry(&handle, entry, &image, &classes, &maps_dir)
    });
    let mut run = Run::new(command, cfg);
    run.written.extend(ok.iter().flat_map(|(_, files)| files.iter().cloned()));
    run.finish(ok.len(), &failed, &report)
}

/// Plain normalized CAMs, one file per (image, present class).
pub fn cam(cfg: &RunConfig) -> Result<i32> {
    let digest = cfg.digest();
    model_batch("cam", cfg, |handle, entry, image, classes, dir| {
        let maps = class_conditional_maps(handle, image, classes)?;
        save_maps(&maps, dir, &entry.id, &digest)
    })
}

/// The refined pipeline, with per-image traces under `traces/`.
pub fn infer(cfg: &RunConfig) -> Result<i32> {
    let digest = cfg.digest();
    let traces_dir = cfg.output_dir.join("traces");
    let options = PipelineOptions { split: cfg.split };
    let (refinement, traces) = (&cfg.refinement, &traces_dir);
    model_batch("infer", cfg, |handle, entry, image, classes, dir| {
        let out = run_pipeline(handle, image, classes, refinement, &options)?;
        let mut written = save_maps(&out.maps, dir, &entry.id, &digest)?;
        create_dir(traces)?;
        let path = traces.join(format!("{}.json", entry.id));
        std::fs::write(&path, serde_json::to_string_pretty(&out.traces)? + "\n")?;
        written.push(path);
        Ok(written)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub images: usize,
    pub miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub processed: usize,
    pub failed: usize,
    pub foreground_classes: usize,
    pub best_threshold: f64,
    pub best_miou: f64,
    /// Share of ground-truth foreground pixels with a positive map for their class.
    pub activated_recall: Option<f64>,
    pub curve: Vec<CurvePoint>,
    /// Scored at the best threshold.
    pub breakdown: Vec<BucketRow>,
}

impl EvalReport {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing report {}", path.display()))
    }
}

fn maps_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.maps.as_deref().context("no response-map directory given (--maps)")
}

/// Threshold sweep, activated recall and class-count breakdown into `report.toml` and `curve.csv`.
pub fn eval(cfg: &RunConfig) -> Result<i32> {
    let maps = maps_dir(cfg)?;
    ensure!(cfg.dataset.labels.is_some(), "eval needs ground-truth labels (--labels)");
    let thresholds = cfg.eval.thresholds.clone().unwrap_or_else(default_thresholds);
    ensure!(!thresholds.is_empty(), "threshold list is empty");
    let (index, report) = dataset(cfg, &[], false)?;
    let pool = pool(cfg)?;
    let (ok, failed) = map_entries(&pool, &index.entries, |entry| {
        let gt = read_label_png(entry.label.as_ref().expect("labels root is set"))?;
        let mut maps = find_maps(maps, &entry.id)?;
        for m in &maps {
            ensure!(
                (m.height(), m.width()) == (gt.height(), gt.width()),
                "map for class {} is {}x{} but the label is {}x{}",
                m.class_id(),
                m.height(),
                m.width(),
                gt.height(),
                gt.width()
            );
        }
        if maps.is_empty() {
            // nothing predicted: background everywhere
            maps.push(ResponseMap::zeros(0, gt.height(), gt.width()));
        }
        Ok(SweepItem { maps, ground_truth: gt })
    });
    let mut run = Run::new("eval", cfg);
    if ok.is_empty() {
        return run.finish(0, &failed, &report);
    }
    let items: Vec<SweepItem> = ok.into_iter().map(|(_, item)| item).collect();
    let foreground_classes = cfg.eval.foreground_classes.unwrap_or_else(|| {
        items
            .iter()
            .flat_map(|it| {
                let gt_max = it.ground_truth.foreground_classes().last().map_or(0, |&c| c as usize);
                let map_max = it.maps.iter().map(|m| m.class_id() + 1).max().unwrap_or(0);
                [gt_max, map_max]
            })
            .max()
            .unwrap_or(0)
            .max(1)
    });
    let sweep = pool.install(|| sweep_dataset(&items, foreground_classes, &thresholds))?;

    let mut recall = RecallCounts::default();
    for it in &items {
        recall.add(&it.maps, &it.ground_truth)?;
    }
    let preds = items
        .iter()
        .map(|it| generate_pseudo_labels(&it.maps, sweep.best_threshold))
        .collect::<camrefine::Result<Vec<_>>>()?;
    let counts: Vec<usize> = items.iter().map(|it| it.ground_truth.foreground_classes().len()).collect();
    let breakdown = breakdown_by_class_count(
        foreground_classes,
        preds.iter().zip(&items).zip(&counts).map(|((p, it), &n)| (p, &it.ground_truth, n)),
    )?;

    let eval_report = EvalReport {
        config_digest: cfg.digest(),
        processed: items.len(),
        failed: failed.len(),
        foreground_classes,
        best_threshold: sweep.best_threshold,
        best_miou: sweep.best_miou,
        activated_recall: recall.recall().ok(),
        curve: sweep
            .thresholds
            .iter()
            .zip(&sweep.miou_per_threshold)
            .map(|(&threshold, &miou)| CurvePoint { threshold, miou })
            .collect(),
        breakdown: breakdown
            .miou()
            .into_iter()
            .map(|(b, miou)| BucketRow {
                bucket: b.label().to_string(),
                images: breakdown.images[b as usize],
                miou,
            })
            .collect(),
    };
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("report.toml");
    std::fs::write(&path, toml::to_string(&eval_report)?)?;
    run.written.push(path);
    let path = cfg.output_dir.join("curve.csv");
    let mut csv = String::from("threshold,miou\n");
    for p in &eval_report.curve {
        csv.push_str(&format!("{},{}\n", p.threshold, p.miou));
    }
    std::fs::write(&path, csv)?;
    run.written.push(path);
    println!(
        "best mIoU {:.4} at background threshold {}",
        eval_report.best_miou, eval_report.best_threshold
    );
    run.finish(items.len(), &failed, &report)
}

/// Palette PNG pseudo labels under `pseudo/`.
pub fn pseudo(cfg: &RunConfig, from_report: Option<&Path>) -> Result<i32> {
    let maps = maps_dir(cfg)?;
    let threshold = match (cfg.bg_threshold, from_report) {
        (_, Some(report)) => EvalReport::from_path(report)?.best_threshold,
        (Some(t), None) => t,
        (None, None) => bail!("give --bg-threshold or --from-report"),
    };
    ensure!((0.0..=1.0).contains(&threshold), "background threshold {threshold} outside [0, 1]");
    let (index, report) = dataset(cfg, &[], false)?;
    let pool = pool(cfg)?;
    let out = cfg.output_dir.join("pseudo");
    create_dir(&out)?;
    let (ok, failed) = map_entries(&pool, &index.entries, |entry| {
        let maps = find_maps(maps, &entry.id)?;
        let labels = if maps.is_empty() {
            let image = read_image(&entry.image)?;
            LabelMap::filled(image.height(), image.width(), 0)
        } else {
            generate_pseudo_labels(&maps, threshold)?
        };
        let path = out.join(format!("{}.png", entry.id));
        write_label_png(&labels, &path)?;
        Ok(path)
    });
    let mut run = Run::new("pseudo", cfg);
    run.written.extend(ok.iter().map(|(_, p)| p.clone()));
    run.finish(ok.len(), &failed, &report)
}

/// Jet-style color for a value in `[0, 1]`.
pub fn colorize(v: f32) -> [f32; 3] {
    let ramp = |center: f32| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

pub const OVERLAY_OPACITY: f32 = 0.5;

pub fn blend(image: &ImageTensor, map: &ResponseMap) -> Result<image::RgbImage> {
    ensure!(
        (map.height(), map.width()) == (image.height(), image.width()),
        "map is {}x{} but the image is {}x{}",
        map.height(),
        map.width(),
        image.height(),
        image.width()
    );
    let mut out = image::RgbImage::new(image.width() as u32, image.height() as u32);
    for (i, px) in out.pixels_mut().enumerate() {
        let (r, c) = (i / image.width(), i % image.width());
        let src = image.pixel(r, c);
        let color = colorize(map.data()[i].clamp(0.0, 1.0));
        for ch in 0..3 {
            let v = (1.0 - OVERLAY_OPACITY) * src[ch] + OVERLAY_OPACITY * color[ch];
            px.0[ch] = (v * 255.0).round() as u8;
        }
    }
    Ok(out)
}

/// One blended PNG per map under `overlay/`.
pub fn overlay(cfg: &RunConfig, class: Option<usize>) -> Result<i32> {
    let maps = maps_dir(cfg)?;
    let (index, report) = dataset(cfg, &[], false)?;
    let pool = pool(cfg)?;
    let out = cfg.output_dir.join("overlay");
    create_dir(&out)?;
    let (ok, failed) = map_entries(&pool, &index.entries, |entry| {
        let image = read_image(&entry.image)?;
        let mut written = Vec::new();
        for m in find_maps(maps, &entry.id)? {
            if class.is_some_and(|c| c != m.class_id()) {
                continue;
            }
            let path = out.join(format!("{}_{}.png", entry.id, m.class_id()));
            blend(&image, &m)?
                .save(&path)
                .with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
        Ok(written)
    });
    let mut run = Run::new("overlay", cfg);
    run.written.extend(ok.iter().flat_map(|(_, files)| files.iter().cloned()));
    run.finish(ok.len(), &failed, &report)
}

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Random 4x4 instances with `classes + 1` channels.
fn loss_instance(rng: &mut ChaCha8Rng, classes: usize) -> Result<(PredictionTensor, LabelMap, SaliencyMap)> {
    let (h, w) = (4, 4);
    let logits = (0..(classes + 1) * h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels = (0..h * w)
        .map(|_| if rng.gen_bool(0.1) { IGNORE } else { rng.gen_range(0..=classes as u8) })
        .collect();
    let saliency = (0..h * w).map(|_| rng.gen_range(0.0f32..=1.0)).collect();
    Ok((
        PredictionTensor::new(classes + 1, h, w, logits)?,
        LabelMap::new(h, w, labels)?,
        SaliencyMap::new(h, w, saliency)?,
    ))
}

/// Largest gradient error over the seeded instances, per class count.
pub fn gradient_errors(cfg: &RunConfig) -> Result<Vec<(usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.loss.seed);
    let mut out = Vec::new();
    for classes in [2, 20] {
        let mut worst = 0f64;
        for _ in 0..cfg.loss.instances {
            let (pred, pseudo, sal) = loss_instance(&mut rng, classes)?;
            let (loss, grad) = total_loss(&pred, &pseudo, &sal, cfg.loss.alpha)?;
            let err = gradient_check(&pred, &grad, 1e-3, |p| {
                Ok(total_loss_with_tau(p, &pseudo, &sal, cfg.loss.alpha, loss.tau)?.0.total)
            })?;
            worst = worst.max(err);
        }
        out.push((classes, worst));
    }
    Ok(out)
}

pub fn loss_check(cfg: &RunConfig) -> Result<i32> {
    ensure!(cfg.loss.instances > 0, "need at least one instance");
    let errors = gradient_errors(cfg)?;
    for (classes, err) in &errors {
        println!("C={classes}: max relative gradient error {err:.3e}");
    }
    let worst = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    println!("max relative gradient error: {worst:.3e}");
    Ok(if worst < GRADIENT_TOLERANCE { EXIT_OK } else { EXIT_ERROR })
}
