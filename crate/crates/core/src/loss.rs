//! Activation-aware mask refinement loss.
//!
//! `total = l_seg + alpha * (exp(tau) - 1) * l_sal`, where `l_seg` is the
//! pseudo-label cross entropy, `l_sal` the binary cross entropy between the
//! softmax background channel and the inverted saliency map, and `tau` the
//! conflict temperature between the pseudo background and the non-salient
//! region. `tau` is a constant weight: no gradient flows through it.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::conflict_temperature;
use crate::types::{LabelMap, SaliencyMap, IGNORE};

/// Weight of the saliency term used for the reported segmentation results.
pub const DEFAULT_ALPHA: f64 = 0.08;

/// Channel-first logits, `channels x height x width`; channel 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PredictionTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels < 2 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "prediction needs at least 2 channels and a non-empty grid, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "prediction has {} values, expected {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("prediction logits must be finite".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.channels, self.height, self.width, data)
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }

    fn logits_at(&self, pixel: usize) -> Vec<f64> {
        let n = self.pixels();
        (0..self.channels).map(|c| self.data[c * n + pixel]).collect()
    }

    fn check_grid(&self, height: usize, width: usize, what: &str) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::Dimension(format!(
                "prediction is {}x{} but {what} is {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Gradient with respect to every logit, laid out like the prediction.
pub type Gradient = Vec<f64>;

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// Mean pixel-wise cross entropy against the pseudo labels; ignored pixels contribute nothing.
pub fn seg_cross_entropy(pred: &PredictionTensor, pseudo: &LabelMap) -> Result<(f64, Gradient)> {
    pred.check_grid(pseudo.height(), pseudo.width(), "the pseudo label")?;
    let n = pred.pixels();
    let counted = pseudo.data().iter().filter(|&&l| l != IGNORE).count();
    if counted == 0 {
        return Err(Error::UndefinedLoss("every pixel is ignored".into()));
    }
    let scale = 1.0 / counted as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.data.len()];
    for (i, &label) in pseudo.data().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let label = label as usize;
        if label >= pred.channels {
            return Err(Error::LabelOutOfRange {
                value: label as u8,
                max: (pred.channels - 1) as u8,
            });
        }
        let logits = pred.logits_at(i);
        loss += log_sum_exp(&logits) - logits[label];
        for (c, p) in softmax(&logits).into_iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            grad[c * n + i] = (p - target) * scale;
        }
    }
    Ok((loss * scale, grad))
}

/// Mean binary cross entropy between the softmax background probability and `1 - saliency`.
pub fn saliency_bce(pred: &PredictionTensor, saliency: &SaliencyMap) -> Result<(f64, Gradient)> {
    pred.check_grid(saliency.height(), saliency.width(), "the saliency map")?;
    let n = pred.pixels();
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.data.len()];
    for (i, &s) in saliency.data().iter().enumerate() {
        let target = 1.0 - s as f64;
        let logits = pred.logits_at(i);
        let lse = log_sum_exp(&logits);
        let rest = log_sum_exp(&logits[1..]);
        let log_p = logits[0] - lse;
        let log_not_p = rest - lse;
        loss -= target * log_p + (1.0 - target) * log_not_p;

        let p = log_p.exp();
        grad[i] = (p - target) * scale;
        // d(bce)/dz_j for j > 0 is -(p - t) * softmax(z[1..])_j, which stays finite as p -> 1
        for (j, r) in softmax(&logits[1..]).into_iter().enumerate() {
            grad[(j + 1) * n + i] = -(p - target) * r * scale;
        }
    }
    Ok((loss * scale, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_seg: f64,
    pub l_sal: f64,
    pub tau: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weight applied to the saliency term.
    pub fn saliency_weight(&self) -> f64 {
        saliency_weight(self.alpha, self.tau)
    }
}

pub fn saliency_weight(alpha: f64, tau: f64) -> f64 {
    alpha * tau.exp_m1()
}

/// Combined loss with `tau` computed from the pseudo labels and saliency.
pub fn total_loss(
    pred: &PredictionTensor,
    pseudo: &LabelMap,
    saliency: &SaliencyMap,
    alpha: f64,
) -> Result<(LossBreakdown, Gradient)> {
    let tau = conflict_temperature(pseudo, saliency)?;
    total_loss_with_tau(pred, pseudo, saliency, alpha, tau)
}

/// Combined loss for a given conflict temperature, e.g. one computed over a whole batch.
pub fn total_loss_with_tau(
    pred: &PredictionTensor,
    pseudo: &LabelMap,
    saliency: &SaliencyMap,
    alpha: f64,
    tau: f64,
) -> Result<(LossBreakdown, Gradient)> {
    if !(alpha > 0.0) {
        return Err(Error::Contract(format!("alpha must be positive, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Contract(format!("tau {tau} outside [0, 1]")));
    }
    let (l_seg, g_seg) = seg_cross_entropy(pred, pseudo)?;
    let (l_sal, g_sal) = saliency_bce(pred, saliency)?;
    let weight = saliency_weight(alpha, tau);
    let grad = g_seg.iter().zip(&g_sal).map(|(a, b)| a + weight * b).collect();
    Ok((
        LossBreakdown {
            l_seg,
            l_sal,
            tau,
            alpha,
            total: l_seg + weight * l_sal,
        },
        grad,
    ))
}

/// Relative error `|a - n| / max(|a|, |n|)` (Euclidean norms) between an
/// analytic gradient `a` and central differences `n` of `f` with step `h`.
/// Zero when both vanish.
pub fn gradient_check(
    pred: &PredictionTensor,
    analytic: &[f64],
    h: f64,
    f: impl Fn(&PredictionTensor) -> Result<f64>,
) -> Result<f64> {
    if analytic.len() != pred.data().len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries, prediction has {}",
            analytic.len(),
            pred.data().len()
        )));
    }
    let mut data = pred.data().to_vec();
    let (mut diff, mut a_norm, mut n_norm) = (0f64, 0f64, 0f64);
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + h;
        let plus = f(&pred.with_data(data.clone())?)?;
        data[i] = orig - h;
        let minus = f(&pred.with_data(data.clone())?)?;
        data[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        diff += (analytic[i] - numeric).powi(2);
        a_norm += analytic[i].powi(2);
        n_norm += numeric.powi(2);
    }
    let denom = a_norm.max(n_norm).sqrt();
    Ok(if denom > 0.0 { diff.sqrt() / denom } else { 0.0 })
}
