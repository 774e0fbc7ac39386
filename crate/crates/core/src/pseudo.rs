//! Pseudo labels from response maps, and the background-threshold sweep.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{mean_iou, ConfusionMatrix};
use crate::types::{LabelMap, ResponseMap};

/// 0.05, 0.10, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Per-pixel argmax over a constant background score and the class maps.
///
/// Foreground wins exact ties against background; among classes the lowest
/// class id wins. A map with class id `c` writes label `c + 1`.
pub fn generate_pseudo_labels(maps: &[ResponseMap], bg_threshold: f64) -> Result<LabelMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("no response maps to label".into()))?;
    if !(0.0..=1.0).contains(&bg_threshold) {
        return Err(Error::Contract(format!(
            "background threshold {bg_threshold} outside [0, 1]"
        )));
    }
    let (h, w) = (first.height(), first.width());
    if let Some(m) = maps.iter().find(|m| (m.height(), m.width()) != (h, w)) {
        return Err(Error::Dimension(format!(
            "map for class {} is {}x{}, expected {h}x{w}",
            m.class_id(),
            m.height(),
            m.width()
        )));
    }
    if let Some(m) = maps.iter().find(|m| m.class_id() >= 254) {
        return Err(Error::Contract(format!("class id {} has no label value", m.class_id())));
    }
    let data = (0..h * w)
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for m in maps {
                let v = m.data()[i] as f64;
                let better = match best {
                    None => v >= bg_threshold,
                    Some((cid, bv)) => v > bv || (v == bv && m.class_id() < cid),
                };
                if better {
                    best = Some((m.class_id(), v));
                }
            }
            best.map_or(0, |(cid, _)| (cid + 1) as u8)
        })
        .collect();
    LabelMap::new(h, w, data)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdSweepResult {
    pub thresholds: Vec<f64>,
    pub miou_per_threshold: Vec<f64>,
    pub best_threshold: f64,
    pub best_miou: f64,
}

/// One image's maps and ground truth.
#[derive(Clone, Debug)]
pub struct SweepItem {
    pub maps: Vec<ResponseMap>,
    pub ground_truth: LabelMap,
}

/// Dataset-level sweep: at each threshold the confusion matrix is accumulated
/// over every item before mIoU is taken. Ties keep the lowest threshold.
pub fn sweep_dataset(
    items: &[SweepItem],
    foreground_classes: usize,
    thresholds: &[f64],
) -> Result<ThresholdSweepResult> {
    if thresholds.is_empty() {
        return Err(Error::Contract("threshold list is empty".into()));
    }
    let miou_per_threshold = thresholds
        .par_iter()
        .map(|&t| {
            let cm = confusion_at(items, foreground_classes, t)?;
            mean_iou(&cm)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &m) in miou_per_threshold.iter().enumerate() {
        if m > miou_per_threshold[best] {
            best = i;
        }
    }
    Ok(ThresholdSweepResult {
        thresholds: thresholds.to_vec(),
        best_threshold: thresholds[best],
        best_miou: miou_per_threshold[best],
        miou_per_threshold,
    })
}

/// Confusion matrix of the pseudo labels at one threshold over all items.
pub fn confusion_at(items: &[SweepItem], foreground_classes: usize, threshold: f64) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(foreground_classes);
    for item in items {
        let pred = generate_pseudo_labels(&item.maps, threshold)?;
        cm.accumulate(&pred, &item.ground_truth)?;
    }
    Ok(cm)
}

/// Single-image sweep. The class count is taken from the ground truth and maps.
pub fn sweep_best_miou(
    maps: &[ResponseMap],
    ground_truth: &LabelMap,
    thresholds: &[f64],
) -> Result<ThresholdSweepResult> {
    let from_gt = ground_truth
        .foreground_classes()
        .last()
        .map_or(0, |&c| c as usize);
    let from_maps = maps.iter().map(|m| m.class_id() + 1).max().unwrap_or(0);
    let item = SweepItem {
        maps: maps.to_vec(),
        ground_truth: ground_truth.clone(),
    };
    sweep_dataset(&[item], from_gt.max(from_maps), thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::IGNORE;
    use proptest::prelude::*;

    fn map(class_id: usize, h: usize, w: usize, data: Vec<f32>) -> ResponseMap {
        ResponseMap::new(class_id, h, w, data).unwrap()
    }

    fn square(h: usize, w: usize) -> Vec<f32> {
        (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                if (2..5).contains(&r) && (2..5).contains(&c) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn separable_square() {
        let labels = generate_pseudo_labels(&[map(0, 8, 8, square(8, 8))], 0.5).unwrap();
        for (i, &l) in labels.data().iter().enumerate() {
            let (r, c) = (i / 8, i % 8);
            let inside = (2..5).contains(&r) && (2..5).contains(&c);
            assert_eq!(l, if inside { 1 } else { 0 });
        }
    }

    #[test]
    fn zero_threshold_makes_positive_pixels_foreground() {
        let labels = generate_pseudo_labels(&[map(3, 1, 3, vec![0.0, 1e-6, 0.4])], 0.0).unwrap();
        // a zero activation ties background at 0 and foreground wins ties
        assert_eq!(labels.data(), &[4, 4, 4]);
    }

    #[test]
    fn ties_favor_lowest_class() {
        let maps = [map(2, 1, 2, vec![0.6, 0.6]), map(1, 1, 2, vec![0.6, 0.5])];
        assert_eq!(generate_pseudo_labels(&maps, 0.6).unwrap().data(), &[2, 3]);
    }

    #[test]
    fn mismatched_or_empty_inputs_fail() {
        assert!(generate_pseudo_labels(&[], 0.5).is_err());
        let maps = [map(0, 1, 2, vec![0.0; 2]), map(1, 2, 1, vec![0.0; 2])];
        assert!(matches!(generate_pseudo_labels(&maps, 0.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn matches_scalar_argmax_oracle() {
        let mut s = 12345u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32) / (1u64 << 24) as f32
        };
        for _ in 0..20 {
            let a: Vec<f32> = (0..64).map(|_| rnd()).collect();
            let b: Vec<f32> = (0..64).map(|_| rnd()).collect();
            let t = rnd() as f64;
            let labels = generate_pseudo_labels(&[map(0, 8, 8, a.clone()), map(1, 8, 8, b.clone())], t).unwrap();
            for i in 0..64 {
                let (va, vb) = (a[i] as f64, b[i] as f64);
                let expected = if va.max(vb) < t {
                    0
                } else if va >= vb {
                    1
                } else {
                    2
                };
                assert_eq!(labels.data()[i], expected);
            }
        }
    }

    #[test]
    fn perfect_maps_score_one_everywhere() {
        let gt_data: Vec<u8> = square(8, 8).iter().map(|&v| v as u8).collect();
        let gt = LabelMap::new(8, 8, gt_data).unwrap();
        let result = sweep_best_miou(&[map(0, 8, 8, square(8, 8))], &gt, &default_thresholds()).unwrap();
        assert!(result.miou_per_threshold.iter().all(|&m| m == 1.0));
        assert_eq!(result.best_miou, 1.0);
        assert_eq!(result.best_threshold, 0.05);
    }

    #[test]
    fn high_threshold_keeps_only_peaks() {
        let mut data = vec![0.5f32; 16];
        data[5] = 1.0;
        let gt = LabelMap::new(4, 4, vec![1; 16]).unwrap();
        let result = sweep_best_miou(&[map(0, 4, 4, data)], &gt, &[0.99]).unwrap();
        // one true positive out of 16 foreground pixels; background absent from gt and pred has 15
        assert_eq!(result.thresholds, vec![0.99]);
        assert!((result.best_miou - 0.5 * (1.0 / 16.0 + 0.0)).abs() < 1e-12);
    }

    #[test]
    fn best_threshold_recomputes_standalone() {
        let gt = LabelMap::new(2, 3, vec![0, 1, 1, IGNORE, 1, 0]).unwrap();
        let m = map(0, 2, 3, vec![0.1, 0.9, 0.3, 0.2, 0.5, 0.4]);
        let r = sweep_best_miou(&[m.clone()], &gt, &default_thresholds()).unwrap();
        let again = sweep_best_miou(&[m], &gt, &[r.best_threshold]).unwrap();
        assert_eq!(again.best_miou, r.best_miou);
    }

    proptest! {
        #[test]
        fn joint_scaling_keeps_labels(vals in proptest::collection::vec(0f32..1.0, 2 * 25), t in 0.0f64..1.0, c in 0.1f64..1.0) {
            // scaling by a power of two keeps every comparison exact
            let scale = 2f64.powi((c * -4.0).round() as i32);
            let maps = [map(0, 5, 5, vals[..25].to_vec()), map(1, 5, 5, vals[25..].to_vec())];
            let scaled: Vec<ResponseMap> = maps
                .iter()
                .map(|m| map(m.class_id(), 5, 5, m.data().iter().map(|v| v * scale as f32).collect()))
                .collect();
            prop_assert_eq!(
                generate_pseudo_labels(&maps, t).unwrap(),
                generate_pseudo_labels(&scaled, scale * t).unwrap()
            );
        }

        #[test]
        fn raising_threshold_never_adds_foreground(vals in proptest::collection::vec(0f32..1.0, 25), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let m = [map(0, 5, 5, vals)];
            let a = generate_pseudo_labels(&m, lo).unwrap();
            let b = generate_pseudo_labels(&m, hi).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(!(*x == 0 && *y != 0));
            }
        }
    }
}
