//! Direct, loop-by-loop reference computations in f64.
//!
//! Nothing here shares code with the library under test; each step is written
//! out the long way so the goldens are an independent check.

use crate::net::{NetRecipe, CLASSES, MEAN, POOL, STD, UNITS};
use crate::scenes::Scene;

#[derive(Clone, Debug)]
pub struct Rgb {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Rgb {
    pub fn from_scene(scene: &Scene) -> Self {
        Rgb {
            height: scene.height,
            width: scene.width,
            pixels: scene
                .pixels
                .iter()
                .map(|p| [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0])
                .collect(),
        }
    }

    pub fn mean(&self) -> [f64; 3] {
        let mut sum = [0.0; 3];
        for p in &self.pixels {
            for ch in 0..3 {
                sum[ch] += p[ch];
            }
        }
        let n = self.pixels.len() as f64;
        [sum[0] / n, sum[1] / n, sum[2] / n]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Rgb {
        let mut pixels = Vec::with_capacity(height * width);
        for r in top..top + height {
            for c in left..left + width {
                pixels.push(self.pixels[r * self.width + c]);
            }
        }
        Rgb {
            height,
            width,
            pixels,
        }
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub feature_height: usize,
    pub feature_width: usize,
    /// `features[k][r * feature_width + c]`
    pub features: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

pub fn forward(net: &NetRecipe, img: &Rgb) -> Forward {
    let (h, w) = (img.height, img.width);
    let fh = (h - POOL) / POOL + 1;
    let fw = (w - POOL) / POOL + 1;

    let mut detect = vec![vec![0.0; h * w]; 3];
    for i in 0..h * w {
        let x: Vec<f64> = img.pixels[i]
            .iter()
            .map(|v| (v - MEAN as f64) / STD as f64)
            .collect();
        for j in 0..3 {
            let mut s = net.conv1_bias[j] as f64;
            for ch in 0..3 {
                s += net.conv1_weight[j][ch] as f64 * x[ch];
            }
            detect[j][i] = relu(s);
        }
    }
    let mut mixed = vec![vec![0.0; h * w]; 3];
    for i in 0..h * w {
        for j in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                s += net.mix_weight[j][k] as f64 * detect[k][i];
            }
            mixed[j][i] = relu(s);
        }
    }

    let mut cells = vec![vec![0.0; fh * fw]; 3];
    for j in 0..3 {
        for cr in 0..fh {
            for cc in 0..fw {
                let mut s = 0.0;
                for r in cr * POOL..cr * POOL + POOL {
                    for c in cc * POOL..cc * POOL + POOL {
                        s += mixed[j][r * w + c];
                    }
                }
                cells[j][cr * fw + cc] = s / (POOL * POOL) as f64;
            }
        }
    }

    let mut gate = net.gate_bias as f64;
    for j in 0..3 {
        let max = cells[j].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        gate += net.gate_weight[j] as f64 * max;
    }
    let gate = relu(gate);

    let mut features = vec![vec![0.0; fh * fw]; UNITS];
    for k in 0..UNITS {
        for i in 0..fh * fw {
            let mut s = net.conv2_bias[k] as f64;
            for j in 0..3 {
                s += net.conv2_weight[k][j] as f64 * cells[j][i];
            }
            features[k][i] = relu(s - net.gate_target[k] as f64 * gate);
        }
    }

    let mut scores = Vec::with_capacity(CLASSES);
    for c in 0..CLASSES {
        let mut z = net.fc_bias[c] as f64;
        for k in 0..UNITS {
            let mean = features[k].iter().sum::<f64>() / (fh * fw) as f64;
            z += net.fc_weight[c][k] as f64 * mean;
        }
        scores.push(1.0 / (1.0 + (-z).exp()));
    }
    Forward {
        feature_height: fh,
        feature_width: fw,
        features,
        scores,
    }
}

/// Class-weighted feature sum, negative values clamped.
pub fn cam(net: &NetRecipe, fwd: &Forward, class_id: usize) -> Vec<f64> {
    (0..fwd.feature_height * fwd.feature_width)
        .map(|i| {
            let mut s = 0.0;
            for k in 0..UNITS {
                s += net.fc_weight[class_id][k] as f64 * fwd.features[k][i];
            }
            relu(s)
        })
        .collect()
}

/// Bilinear resize with the corner pixels of input and output aligned.
pub fn resize(grid: &[f64], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f64> {
    let coord = |i: usize, src: usize, dst: usize| -> f64 {
        if src > 1 && dst > 1 {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        } else {
            0.0
        }
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let y = coord(i, gh, h);
        let y0 = (y.floor() as usize).min(gh - 1);
        let y1 = (y0 + 1).min(gh - 1);
        let ty = y - y0 as f64;
        for j in 0..w {
            let x = coord(j, gw, w);
            let x0 = (x.floor() as usize).min(gw - 1);
            let x1 = (x0 + 1).min(gw - 1);
            let tx = x - x0 as f64;
            out[i * w + j] = (1.0 - ty) * (1.0 - tx) * grid[y0 * gw + x0]
                + (1.0 - ty) * tx * grid[y0 * gw + x1]
                + ty * (1.0 - tx) * grid[y1 * gw + x0]
                + ty * tx * grid[y1 * gw + x1];
        }
    }
    out
}

pub fn normalized(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter().map(|v| v / max).collect()
    } else {
        values.to_vec()
    }
}

/// Clamped CAM lifted to image size and scaled to a maximum of 1.
pub fn response(net: &NetRecipe, img: &Rgb, class_id: usize) -> Vec<f64> {
    let fwd = forward(net, img);
    let grid = cam(net, &fwd, class_id);
    normalized(&resize(
        &grid,
        fwd.feature_height,
        fwd.feature_width,
        img.height,
        img.width,
    ))
}

pub const ERASE_THRESHOLD: f64 = 0.7;
pub const STOP_FRACTION: f64 = 0.01;
pub const MAX_ITERATIONS: usize = 8;
pub const MIN_PATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Step {
    pub iteration: usize,
    pub erased_pixels: usize,
    pub newly_activated: usize,
    pub activated_total: usize,
}

#[derive(Clone, Debug)]
pub struct Iterated {
    pub steps: Vec<Step>,
    /// True when the loop ended on the 1% rule rather than the cap.
    pub stopped_early: bool,
    /// Erased pixels of each iteration that erased anything.
    pub erased: Vec<Vec<bool>>,
    /// Accumulated map, normalized.
    pub map: Vec<f64>,
}

/// Erase-and-reinfer loop on one image, erasing with `fill`.
pub fn iterate(net: &NetRecipe, img: &Rgb, class_id: usize, fill: [f64; 3]) -> Iterated {
    let n = img.height * img.width;
    let mut current = img.clone();
    let mut acc = vec![0.0; n];
    let mut active = vec![false; n];
    let mut total = 0;
    let mut steps = Vec::new();
    let mut erased = Vec::new();
    let mut stopped_early = false;
    for iteration in 1..=MAX_ITERATIONS {
        let map = response(net, &current, class_id);
        let mut newly = 0;
        for i in 0..n {
            acc[i] += map[i];
            if !active[i] && acc[i] > 0.0 {
                active[i] = true;
                newly += 1;
            }
        }
        total += newly;
        let below = (newly as f64) < STOP_FRACTION * n as f64;
        let mut erased_now = 0;
        if !below && iteration < MAX_ITERATIONS {
            let mask: Vec<bool> = map.iter().map(|&v| v >= ERASE_THRESHOLD).collect();
            for i in 0..n {
                if mask[i] {
                    current.pixels[i] = fill;
                    erased_now += 1;
                }
            }
            erased.push(mask);
        }
        steps.push(Step {
            iteration,
            erased_pixels: erased_now,
            newly_activated: newly,
            activated_total: total,
        });
        if below {
            stopped_early = true;
            break;
        }
    }
    Iterated {
        steps,
        stopped_early,
        erased,
        map: normalized(&acc),
    }
}

/// Single-class split and unite: four patches meeting at the rounded center of
/// mass of the plain response, each refined on its own, merged by maximum.
pub fn split_and_unite(net: &NetRecipe, img: &Rgb, class_id: usize) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let fill = img.mean();
    if h < 2 * MIN_PATCH || w < 2 * MIN_PATCH {
        return iterate(net, img, class_id, fill).map;
    }
    let base = response(net, img, class_id);
    let (mut sum, mut sr, mut sc) = (0.0, 0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let v = base[r * w + c];
            sum += v;
            sr += v * r as f64;
            sc += v * c as f64;
        }
    }
    let (cr, cc) = if sum > 0.0 {
        (sr / sum, sc / sum)
    } else {
        ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0)
    };
    let row = (cr.round() as usize).clamp(MIN_PATCH, h - MIN_PATCH);
    let col = (cc.round() as usize).clamp(MIN_PATCH, w - MIN_PATCH);
    let mut merged = vec![0.0f64; h * w];
    for (top, bottom) in [(0, row), (row, h)] {
        for (left, right) in [(0, col), (col, w)] {
            let patch = img.crop(top, left, bottom - top, right - left);
            let refined = iterate(net, &patch, class_id, fill).map;
            for r in 0..bottom - top {
                for c in 0..right - left {
                    let i = (top + r) * w + left + c;
                    merged[i] = merged[i].max(refined[r * (right - left) + c]);
                }
            }
        }
    }
    normalized(&merged)
}

/// Best mean IoU over thresholds for single-class maps against binary masks.
/// Returns `(best_threshold, best_miou)`, keeping the first maximum.
pub fn best_binary_miou(items: &[(Vec<f64>, Vec<u8>)], thresholds: &[f64]) -> (f64, f64) {
    let mut best = (thresholds[0], f64::NEG_INFINITY);
    for &t in thresholds {
        // cm[gt][pred]
        let mut cm = [[0u64; 2]; 2];
        for (map, gt) in items {
            for (v, &g) in map.iter().zip(gt) {
                let pred = (*v >= t) as usize;
                cm[g as usize][pred] += 1;
            }
        }
        let mut ious = Vec::new();
        for k in 0..2 {
            let union = cm[k][0] + cm[k][1] + cm[0][k] + cm[1][k] - cm[k][k];
            if union > 0 {
                ious.push(cm[k][k] as f64 / union as f64);
            }
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        if miou > best.1 {
            best = (t, miou);
        }
    }
    best
}

pub fn thresholds() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// Loss on a `channels x n` logit block. `pseudo` uses 255 for ignored pixels;
/// saliency is in `[0, 1]`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LossValue {
    pub l_seg: f64,
    pub l_sal: f64,
    pub tau: f64,
    pub total: f64,
    pub gradient: Vec<f64>,
}

fn softmax_at(logits: &[f64], channels: usize, n: usize, i: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..channels).map(|c| logits[c * n + i]).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn tau(pseudo: &[u8], saliency: &[f64]) -> f64 {
    let mut ious = Vec::new();
    for want_bg in [true, false] {
        let (mut inter, mut union) = (0u64, 0u64);
        for (&p, &s) in pseudo.iter().zip(saliency) {
            if p == 255 {
                continue;
            }
            let a = (p == 0) == want_bg;
            let b = (s < 0.5) == want_bg;
            inter += (a && b) as u64;
            union += (a || b) as u64;
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

pub fn loss(logits: &[f64], channels: usize, pseudo: &[u8], saliency: &[f64], alpha: f64) -> LossValue {
    let n = pseudo.len();
    let counted = pseudo.iter().filter(|&&p| p != 255).count() as f64;
    let t = tau(pseudo, saliency);
    let weight = alpha * (t.exp() - 1.0);
    let (mut l_seg, mut l_sal) = (0.0, 0.0);
    let mut gradient = vec![0.0; channels * n];
    for i in 0..n {
        let p = softmax_at(logits, channels, n, i);
        if pseudo[i] != 255 {
            let y = pseudo[i] as usize;
            l_seg -= p[y].ln() / counted;
            for c in 0..channels {
                let onehot = if c == y { 1.0 } else { 0.0 };
                gradient[c * n + i] += (p[c] - onehot) / counted;
            }
        }
        let target = 1.0 - saliency[i];
        let bg = p[0];
        l_sal -= (target * bg.ln() + (1.0 - target) * (1.0 - bg).ln()) / n as f64;
        // chain rule through the background probability
        let d_bg = -target / bg + (1.0 - target) / (1.0 - bg);
        for c in 0..channels {
            let d_bg_d_z = bg * (if c == 0 { 1.0 } else { 0.0 } - p[c]);
            gradient[c * n + i] += weight * d_bg * d_bg_d_z / n as f64;
        }
    }
    LossValue {
        l_seg,
        l_sal,
        tau: t,
        total: l_seg + weight * l_sal,
        gradient,
    }
}

/// Largest relative difference between the oracle's analytic gradient and a
/// five-point central difference of its own loss. Entries below 1e-6 in
/// magnitude are compared against 1e-6.
pub fn loss_self_check(logits: &[f64], channels: usize, pseudo: &[u8], saliency: &[f64], alpha: f64) -> f64 {
    let analytic = loss(logits, channels, pseudo, saliency, alpha).gradient;
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut z = logits.to_vec();
    for i in 0..z.len() {
        let orig = z[i];
        let mut at = |d: f64| {
            z[i] = orig + d;
            loss(&z, channels, pseudo, saliency, alpha).total
        };
        let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        z[i] = orig;
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
