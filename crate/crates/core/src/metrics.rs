//! Segmentation evaluation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{LabelMap, ResponseMap, SaliencyMap, IGNORE};

/// Rows are ground truth, columns are prediction; index 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    /// Empty matrix for `foreground_classes` classes plus background.
    pub fn new(foreground_classes: usize) -> Self {
        let classes = foreground_classes + 1;
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Number of rows/columns, background included.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn transpose(&self) -> Self {
        let n = self.classes;
        let mut counts = vec![0; n * n];
        for g in 0..n {
            for p in 0..n {
                counts[p * n + g] = self.counts[g * n + p];
            }
        }
        Self { classes: n, counts }
    }

    /// Tallies `pred` against `gt`, skipping pixels where `gt` is [`IGNORE`].
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::Dimension(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let max = (self.classes - 1) as u8;
        let mut local = vec![0u64; self.counts.len()];
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE {
                continue;
            }
            if g > max {
                return Err(Error::LabelOutOfRange { value: g, max });
            }
            if p > max {
                return Err(Error::LabelOutOfRange { value: p, max });
            }
            local[g as usize * self.classes + p as usize] += 1;
        }
        for (c, l) in self.counts.iter_mut().zip(local) {
            *c += l;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Dimension(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both prediction and ground truth.
    pub fn class_ious(&self) -> Vec<Option<f64>> {
        let n = self.classes;
        (0..n)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..n).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..n).map(|g| self.get(g, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes that appear in prediction or ground truth.
pub fn mean_iou(cm: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = cm.class_ious().into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::UndefinedMetric("no class appears in prediction or ground truth".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Running tally for the activated-region recall.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RecallCounts {
    pub activated: u64,
    pub foreground: u64,
}

impl RecallCounts {
    /// Adds one image. Each map's class id `c` scores ground-truth label `c + 1`.
    pub fn add(&mut self, maps: &[ResponseMap], gt: &LabelMap) -> Result<()> {
        for m in maps {
            if (m.height(), m.width()) != (gt.height(), gt.width()) {
                return Err(Error::Dimension(format!(
                    "map is {}x{} but ground truth is {}x{}",
                    m.height(),
                    m.width(),
                    gt.height(),
                    gt.width()
                )));
            }
        }
        for (i, &g) in gt.data().iter().enumerate() {
            if g == 0 || g == IGNORE {
                continue;
            }
            self.foreground += 1;
            let hit = maps
                .iter()
                .any(|m| m.class_id() + 1 == g as usize && m.data()[i] > 0.0);
            if hit {
                self.activated += 1;
            }
        }
        Ok(())
    }

    pub fn recall(&self) -> Result<f64> {
        if self.foreground == 0 {
            return Err(Error::UndefinedMetric("no foreground pixels".into()));
        }
        Ok(self.activated as f64 / self.foreground as f64)
    }
}

/// Fraction of ground-truth foreground pixels whose class map is positive.
pub fn activated_recall(maps: &[ResponseMap], gt: &LabelMap) -> Result<f64> {
    let mut counts = RecallCounts::default();
    counts.add(maps, gt)?;
    counts.recall()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassCountBucket {
    One,
    Two,
    ThreeOrMore,
}

impl ClassCountBucket {
    pub fn of(class_count: usize) -> Option<Self> {
        match class_count {
            0 => None,
            1 => Some(Self::One),
            2 => Some(Self::Two),
            _ => Some(Self::ThreeOrMore),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::One => "1",
            Self::Two => "2",
            Self::ThreeOrMore => "3+",
        }
    }

    pub const ALL: [ClassCountBucket; 3] = [Self::One, Self::Two, Self::ThreeOrMore];
}

/// Confusion matrices split by how many ground-truth classes an image holds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCountBreakdown {
    pub buckets: [ConfusionMatrix; 3],
    pub overall: ConfusionMatrix,
    pub images: [usize; 3],
}

impl ClassCountBreakdown {
    pub fn new(foreground_classes: usize) -> Self {
        let cm = ConfusionMatrix::new(foreground_classes);
        Self {
            buckets: [cm.clone(), cm.clone(), cm.clone()],
            overall: cm,
            images: [0; 3],
        }
    }

    /// Adds one image. Images with no foreground class count toward the overall matrix only.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, class_count: usize) -> Result<()> {
        let mut cm = ConfusionMatrix::new(self.overall.classes() - 1);
        cm.accumulate(pred, gt)?;
        self.overall.merge(&cm)?;
        if let Some(bucket) = ClassCountBucket::of(class_count) {
            self.buckets[bucket as usize].merge(&cm)?;
            self.images[bucket as usize] += 1;
        }
        Ok(())
    }

    /// mIoU per bucket, `None` when a bucket holds no images.
    pub fn miou(&self) -> Vec<(ClassCountBucket, Option<f64>)> {
        ClassCountBucket::ALL
            .iter()
            .map(|&b| {
                let value = if self.images[b as usize] == 0 {
                    None
                } else {
                    mean_iou(&self.buckets[b as usize]).ok()
                };
                (b, value)
            })
            .collect()
    }
}

/// Bucketed breakdown over `(prediction, ground truth, ground-truth class count)` triples.
pub fn breakdown_by_class_count<'a>(
    foreground_classes: usize,
    results: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap, usize)>,
) -> Result<ClassCountBreakdown> {
    let mut breakdown = ClassCountBreakdown::new(foreground_classes);
    for (pred, gt, count) in results {
        breakdown.add(pred, gt, count)?;
    }
    Ok(breakdown)
}

/// Saliency at or above this value counts as salient.
pub const SALIENCY_CUT: f32 = 0.5;

/// Agreement between the pseudo-label background and the non-salient region,
/// as the mean of the two binary IoUs (background and its complement).
pub fn conflict_temperature(pseudo: &LabelMap, saliency: &SaliencyMap) -> Result<f64> {
    if (pseudo.height(), pseudo.width()) != (saliency.height(), saliency.width()) {
        return Err(Error::Dimension(format!(
            "pseudo label is {}x{} but saliency is {}x{}",
            pseudo.height(),
            pseudo.width(),
            saliency.height(),
            saliency.width()
        )));
    }
    // [both background, pseudo only, saliency only, neither]
    let mut counts = [0u64; 4];
    for (&p, &s) in pseudo.data().iter().zip(saliency.data()) {
        if p == IGNORE {
            continue;
        }
        let pseudo_bg = p == 0;
        let non_salient = s < SALIENCY_CUT;
        let bucket = match (pseudo_bg, non_salient) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        counts[bucket] += 1;
    }
    let [both, pseudo_only, sal_only, neither] = counts;
    let disagree = pseudo_only + sal_only;
    let ious: Vec<f64> = [both, neither]
        .into_iter()
        .filter(|&agree| agree + disagree > 0)
        .map(|agree| agree as f64 / (agree + disagree) as f64)
        .collect();
    if ious.is_empty() {
        return Ok(0.0);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}
