//! Split & unite augmentation and iterative erase-and-reinfer refinement.
//!
//! Both procedures only ever run forward passes of the frozen classifier. They
//! compose in [`run_pipeline`]: the image is split about the CAM mass centers,
//! every patch is refined iteratively, and the patch maps are max-merged back.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{class_conditional_maps, ClassifierHandle};
use crate::error::{Error, Result};
use crate::types::{normalize, ImageTensor, Rect, ResponseMap, SplitMode, SplitSpec, MIN_PATCH};

/// Anything that can produce normalized image-resolution response maps.
pub trait ResponseSource: Sync {
    fn response_maps(&self, image: &ImageTensor, classes: &[usize]) -> Result<Vec<ResponseMap>>;
}

impl ResponseSource for ClassifierHandle {
    fn response_maps(&self, image: &ImageTensor, classes: &[usize]) -> Result<Vec<ResponseMap>> {
        class_conditional_maps(self, image, classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    /// Normalized activation at or above which pixels are erased.
    pub erase_threshold: f32,
    /// Stop once fewer than this fraction of pixels become newly activated.
    pub stop_fraction: f64,
    pub max_iterations: usize,
    /// Accumulated activation above which a pixel counts as activated.
    pub activation_floor: f32,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            erase_threshold: 0.7,
            stop_fraction: 0.01,
            max_iterations: 8,
            activation_floor: 0.0,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.erase_threshold > 0.0 && self.erase_threshold <= 1.0) {
            return Err(Error::Contract(format!(
                "erase_threshold {} outside (0, 1]",
                self.erase_threshold
            )));
        }
        if !(self.stop_fraction > 0.0 && self.stop_fraction < 1.0) {
            return Err(Error::Contract(format!(
                "stop_fraction {} outside (0, 1)",
                self.stop_fraction
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::Contract("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Activation-weighted centroid `(row, col)`; the geometric center for an all-zero map.
pub fn center_of_mass(map: &ResponseMap) -> (f64, f64) {
    let (mut total, mut rows, mut cols) = (0f64, 0f64, 0f64);
    for r in 0..map.height() {
        for c in 0..map.width() {
            let v = map.get(r, c) as f64;
            total += v;
            rows += r as f64 * v;
            cols += c as f64 * v;
        }
    }
    if total > 0.0 {
        (rows / total, cols / total)
    } else {
        (
            (map.height() - 1) as f64 / 2.0,
            (map.width() - 1) as f64 / 2.0,
        )
    }
}

fn check_splittable(height: usize, width: usize) -> Result<()> {
    if height < 2 * MIN_PATCH || width < 2 * MIN_PATCH {
        return Err(Error::SplitDegenerate {
            height,
            width,
            min_patch: MIN_PATCH,
        });
    }
    Ok(())
}

fn check_point(height: usize, width: usize, (row, col): (f64, f64)) -> Result<()> {
    if !(0.0..=height as f64).contains(&row) || !(0.0..=width as f64).contains(&col) {
        return Err(Error::Contract(format!(
            "center ({row}, {col}) outside {height}x{width} image"
        )));
    }
    Ok(())
}

fn snap(v: f64, lo: usize, hi: usize) -> usize {
    (v.round() as usize).clamp(lo, hi)
}

/// Four patches meeting at `center`, with the split line kept `MIN_PATCH` from every border.
pub fn split_single_class(height: usize, width: usize, center: (f64, f64)) -> Result<SplitSpec> {
    check_point(height, width, center)?;
    check_splittable(height, width)?;
    let row = snap(center.0, MIN_PATCH, height - MIN_PATCH);
    let col = snap(center.1, MIN_PATCH, width - MIN_PATCH);
    Ok(SplitSpec {
        patches: vec![
            Rect::from_bounds(0, 0, row, col),
            Rect::from_bounds(0, col, row, width),
            Rect::from_bounds(row, 0, height, col),
            Rect::from_bounds(row, col, height, width),
        ],
        mode: SplitMode::SingleClass,
        overlap: None,
    })
}

/// Interval `[lo, hi)` widened about its midpoint to at least `MIN_PATCH`, kept inside `0..limit`.
fn widen(lo: usize, hi: usize, limit: usize) -> (usize, usize) {
    if hi - lo >= MIN_PATCH {
        return (lo, hi);
    }
    let mid = (lo + hi) / 2;
    let start = mid.saturating_sub(MIN_PATCH / 2).min(limit - MIN_PATCH);
    (start, start + MIN_PATCH)
}

/// Central rectangle spanned by two class centers; each patch runs from one image
/// corner to the far side of that rectangle, so all four contain it.
pub fn split_two_class(
    height: usize,
    width: usize,
    center_a: (f64, f64),
    center_b: (f64, f64),
) -> Result<SplitSpec> {
    check_point(height, width, center_a)?;
    check_point(height, width, center_b)?;
    check_splittable(height, width)?;
    let (top, bottom) = widen(
        snap(center_a.0.min(center_b.0), 0, height),
        snap(center_a.0.max(center_b.0), 0, height),
        height,
    );
    let (left, right) = widen(
        snap(center_a.1.min(center_b.1), 0, width),
        snap(center_a.1.max(center_b.1), 0, width),
        width,
    );
    Ok(SplitSpec {
        patches: vec![
            Rect::from_bounds(0, 0, bottom, right),
            Rect::from_bounds(0, left, bottom, width),
            Rect::from_bounds(top, 0, height, right),
            Rect::from_bounds(top, left, height, width),
        ],
        mode: SplitMode::TwoClass,
        overlap: Some(Rect::from_bounds(top, left, bottom, right)),
    })
}

/// One single-class split per class, each used only for that class's map.
pub fn split_multi_class(
    height: usize,
    width: usize,
    centers: &[(usize, (f64, f64))],
) -> Result<Vec<(usize, SplitSpec)>> {
    if centers.len() < 3 {
        return Err(Error::Contract(format!(
            "multi-class split needs at least 3 classes, got {}",
            centers.len()
        )));
    }
    centers
        .iter()
        .map(|&(class_id, center)| {
            let mut spec = split_single_class(height, width, center)?;
            spec.mode = SplitMode::MultiClass;
            Ok((class_id, spec))
        })
        .collect()
}

/// Per-pixel max over all patches covering it, without normalization.
pub fn merge_splits_raw(patch_maps: &[(ResponseMap, Rect)]) -> Result<ResponseMap> {
    let (first, _) = patch_maps
        .first()
        .ok_or_else(|| Error::Contract("no patches to merge".into()))?;
    let height = patch_maps.iter().map(|(_, r)| r.bottom()).max().unwrap_or(0);
    let width = patch_maps.iter().map(|(_, r)| r.right()).max().unwrap_or(0);
    let mut merged = vec![0f32; height * width];
    let mut covered = vec![false; height * width];
    for (map, rect) in patch_maps {
        if (map.height(), map.width()) != (rect.height, rect.width) {
            return Err(Error::Dimension(format!(
                "patch map is {}x{} but its rectangle is {}x{}",
                map.height(),
                map.width(),
                rect.height,
                rect.width
            )));
        }
        for r in 0..rect.height {
            for c in 0..rect.width {
                let i = (rect.top + r) * width + rect.left + c;
                let v = map.get(r, c);
                if !covered[i] || v > merged[i] {
                    merged[i] = v;
                }
                covered[i] = true;
            }
        }
    }
    if let Some(i) = covered.iter().position(|&c| !c) {
        return Err(Error::MergeCoverage {
            row: i / width,
            col: i % width,
        });
    }
    ResponseMap::new(first.class_id(), height, width, merged)
}

/// Max-merge of patch maps back onto the full image, then normalized.
pub fn merge_splits(patch_maps: &[(ResponseMap, Rect)]) -> Result<ResponseMap> {
    normalize(&merge_splits_raw(patch_maps)?)
}

/// Replaces pixels whose normalized activation is at least `threshold` with
/// the image's mean color. Returns the new image and the erased-pixel mask.
pub fn erase_high_activation(
    image: &ImageTensor,
    map: &ResponseMap,
    threshold: f32,
) -> Result<(ImageTensor, Vec<bool>)> {
    erase_with_fill(image, map, threshold, image.mean_color())
}

/// As [`erase_high_activation`] with an explicit fill color.
pub fn erase_with_fill(
    image: &ImageTensor,
    map: &ResponseMap,
    threshold: f32,
    fill: [f32; 3],
) -> Result<(ImageTensor, Vec<bool>)> {
    if (map.height(), map.width()) != (image.height(), image.width()) {
        return Err(Error::Dimension(format!(
            "map is {}x{} but image is {}x{}",
            map.height(),
            map.width(),
            image.height(),
            image.width()
        )));
    }
    if !map.is_normalized() {
        return Err(Error::Contract("erasing requires a normalized map".into()));
    }
    let mask: Vec<bool> = map.data().iter().map(|&v| v >= threshold).collect();
    let mut data = image.data().to_vec();
    for (px, _) in data.chunks_exact_mut(3).zip(&mask).filter(|(_, &m)| m) {
        px.copy_from_slice(&fill);
    }
    Ok((ImageTensor::new(image.height(), image.width(), data)?, mask))
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    /// Pixels erased after this iteration (zero on the final one).
    pub erased_pixels: usize,
    pub newly_activated: usize,
    pub activated_total: usize,
    #[serde(skip)]
    pub erased_mask: Vec<bool>,
    /// Accumulated map after this iteration, before the final normalization.
    #[serde(skip)]
    pub accumulated: ResponseMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    BelowStopFraction,
    IterationCap,
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub stop: Option<StopReason>,
}

#[derive(Clone, Debug)]
pub struct Refined {
    pub map: ResponseMap,
    pub trace: IterationTrace,
}

/// A failed refinement, with the records of the iterations that completed.
#[derive(Debug)]
pub struct InferFailure {
    pub error: Error,
    pub trace: IterationTrace,
}

impl std::fmt::Display for InferFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} after {} iterations", self.error, self.trace.records.len())
    }
}

impl std::error::Error for InferFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<InferFailure> for Error {
    fn from(f: InferFailure) -> Self {
        f.error
    }
}

/// Iterative erase-and-reinfer on the whole image, erasing with the image's own mean color.
pub fn iterative_infer<S: ResponseSource + ?Sized>(
    source: &S,
    image: &ImageTensor,
    class_id: usize,
    config: &RefinementConfig,
) -> std::result::Result<Refined, InferFailure> {
    iterative_infer_with_fill(source, image, image.mean_color(), class_id, config)
}

/// Iterative erase-and-reinfer with an explicit erase color, used for patches
/// which must erase with the full original image's mean.
pub fn iterative_infer_with_fill<S: ResponseSource + ?Sized>(
    source: &S,
    image: &ImageTensor,
    fill: [f32; 3],
    class_id: usize,
    config: &RefinementConfig,
) -> std::result::Result<Refined, InferFailure> {
    let mut trace = IterationTrace {
        records: Vec::new(),
        stop: None,
    };
    let fail = |error, trace| InferFailure { error, trace };
    if let Err(e) = config.validate() {
        return Err(fail(e, trace));
    }
    let (h, w) = (image.height(), image.width());
    let stop_count = config.stop_fraction * (h * w) as f64;
    let mut accumulated = vec![0f32; h * w];
    let mut activated = vec![false; h * w];
    let mut activated_total = 0;
    let mut current = image.clone();

    for iteration in 1..=config.max_iterations {
        let map = match source.response_maps(&current, &[class_id]) {
            Ok(mut maps) => maps.remove(0),
            Err(e) => return Err(fail(e, trace)),
        };
        for (a, &v) in accumulated.iter_mut().zip(map.data()) {
            *a += v;
        }
        let mut newly_activated = 0;
        for (flag, &a) in activated.iter_mut().zip(&accumulated) {
            if !*flag && a > config.activation_floor {
                *flag = true;
                newly_activated += 1;
            }
        }
        activated_total += newly_activated;
        let snapshot = ResponseMap::new(class_id, h, w, accumulated.clone())
            .expect("sum of non-negative maps");

        let stop = if (newly_activated as f64) < stop_count {
            Some(StopReason::BelowStopFraction)
        } else if iteration == config.max_iterations {
            Some(StopReason::IterationCap)
        } else {
            None
        };
        let erased_mask = if stop.is_none() {
            match erase_with_fill(&current, &map, config.erase_threshold, fill) {
                Ok((next, mask)) => {
                    current = next;
                    mask
                }
                Err(e) => return Err(fail(e, trace)),
            }
        } else {
            vec![false; h * w]
        };
        trace.records.push(IterationRecord {
            iteration,
            erased_pixels: erased_mask.iter().filter(|&&m| m).count(),
            newly_activated,
            activated_total,
            erased_mask,
            accumulated: snapshot,
        });
        if stop.is_some() {
            trace.stop = stop;
            break;
        }
    }

    let total = ResponseMap::new(class_id, h, w, accumulated).expect("sum of non-negative maps");
    match normalize(&total) {
        Ok(map) => Ok(Refined { map, trace }),
        Err(e) => Err(fail(e, trace)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Apply split & unite; when false every class is refined on the whole image.
    pub split: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { split: true }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PatchTrace {
    pub rect: Rect,
    pub trace: IterationTrace,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassTrace {
    pub class_id: usize,
    pub center: (f64, f64),
    pub split: Option<SplitSpec>,
    /// Why the split was skipped, when it was.
    pub fallback: Option<String>,
    pub patches: Vec<PatchTrace>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub maps: Vec<ResponseMap>,
    pub traces: Vec<ClassTrace>,
}

/// Split & unite plus iterative refinement for every present class.
///
/// Patch jobs run on the current rayon pool; results are assembled in job
/// order, so the output does not depend on the number of workers.
pub fn run_pipeline<S: ResponseSource + ?Sized>(
    source: &S,
    image: &ImageTensor,
    present_classes: &[usize],
    config: &RefinementConfig,
    options: &PipelineOptions,
) -> Result<PipelineOutput> {
    if present_classes.is_empty() {
        return Err(Error::Contract("no present classes to refine".into()));
    }
    config.validate()?;
    let (h, w) = (image.height(), image.width());
    let baseline = source.response_maps(image, present_classes)?;
    let centers: Vec<(usize, (f64, f64))> = present_classes
        .iter()
        .zip(&baseline)
        .map(|(&c, m)| (c, center_of_mass(m)))
        .collect();

    let whole = Rect::new(0, 0, h, w);
    let (splits, fallback): (Vec<Option<SplitSpec>>, Option<String>) = if !options.split {
        (vec![None; centers.len()], Some("split disabled".into()))
    } else {
        let planned = match centers.as_slice() {
            [(_, c)] => split_single_class(h, w, *c).map(|s| vec![s]),
            [(_, a), (_, b)] => split_two_class(h, w, *a, *b).map(|s| vec![s.clone(), s]),
            _ => split_multi_class(h, w, &centers).map(|v| v.into_iter().map(|(_, s)| s).collect()),
        };
        match planned {
            Ok(specs) => (specs.into_iter().map(Some).collect(), None),
            Err(e @ Error::SplitDegenerate { .. }) => {
                log::debug!("falling back to whole-image refinement: {e}");
                (vec![None; centers.len()], Some(e.to_string()))
            }
            Err(e) => return Err(e),
        }
    };

    let jobs: Vec<(usize, usize, Rect)> = centers
        .iter()
        .zip(&splits)
        .enumerate()
        .flat_map(|(slot, ((class_id, _), split))| {
            let rects = match split {
                Some(spec) => spec.patches.clone(),
                None => vec![whole],
            };
            rects.into_iter().map(move |r| (slot, *class_id, r))
        })
        .collect();

    let fill = image.mean_color();
    let results: Vec<Result<Refined>> = jobs
        .par_iter()
        .map(|&(_, class_id, rect)| {
            let patch = if rect == whole { image.clone() } else { image.crop(&rect)? };
            iterative_infer_with_fill(source, &patch, fill, class_id, config).map_err(|f| {
                log::warn!(
                    "refinement of class {class_id} failed after {} iterations",
                    f.trace.records.len()
                );
                f.error
            })
        })
        .collect();

    let mut per_class: Vec<Vec<(ResponseMap, PatchTrace)>> = vec![Vec::new(); centers.len()];
    for ((slot, _, rect), result) in jobs.into_iter().zip(results) {
        let refined = result?;
        per_class[slot].push((refined.map, PatchTrace { rect, trace: refined.trace }));
    }

    let mut maps = Vec::with_capacity(centers.len());
    let mut traces = Vec::with_capacity(centers.len());
    for (((class_id, center), split), patches) in centers.into_iter().zip(splits).zip(per_class) {
        let pairs: Vec<(ResponseMap, Rect)> =
            patches.iter().map(|(m, t)| (m.clone(), t.rect)).collect();
        maps.push(merge_splits(&pairs)?.with_class_id(class_id));
        traces.push(ClassTrace {
            class_id,
            center,
            split,
            fallback: fallback.clone(),
            patches: patches.into_iter().map(|(_, t)| t).collect(),
        });
    }
    Ok(PipelineOutput { maps, traces })
}
