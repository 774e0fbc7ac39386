//! Value types shared by every stage of the pipeline.
//!
//! All types are immutable after construction and validate their invariants
//! in their constructors, so downstream code can rely on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from losses and evaluation.
pub const IGNORE: u8 = 255;

/// Smallest side length (pixels) a split patch may have.
pub const MIN_PATCH: usize = 32;

/// An RGB image with values in `[0, 1]`, stored row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
    mean_color: [f32; 3],
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "image data has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("image value {v} outside [0, 1]")));
        }
        let mean_color = channel_means(&data);
        Ok(Self {
            height,
            width,
            data,
            mean_color,
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mean_color(&self) -> [f32; 3] {
        self.mean_color
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Copies out the pixels under `rect`. The crop gets its own mean color.
    pub fn crop(&self, rect: &Rect) -> Result<ImageTensor> {
        rect.check_within(self.height, self.width)?;
        let mut data = Vec::with_capacity(rect.height * rect.width * 3);
        for row in rect.top..rect.bottom() {
            let start = (row * self.width + rect.left) * 3;
            data.extend_from_slice(&self.data[start..start + rect.width * 3]);
        }
        ImageTensor::new(rect.height, rect.width, data)
    }
}

fn channel_means(data: &[f32]) -> [f32; 3] {
    let mut sums = [0f64; 3];
    for px in data.chunks_exact(3) {
        for c in 0..3 {
            sums[c] += px[c] as f64;
        }
    }
    let n = (data.len() / 3) as f64;
    [
        (sums[0] / n) as f32,
        (sums[1] / n) as f32,
        (sums[2] / n) as f32,
    ]
}

/// Penultimate-layer unit activations, unit-major (`K x h x w`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    units: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureStack {
    pub fn new(units: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if units == 0 || height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "feature stack must be non-empty, got {units}x{height}x{width}"
            )));
        }
        if data.len() != units * height * width {
            return Err(Error::Dimension(format!(
                "feature data has {} values, expected {units}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("feature values must be finite".into()));
        }
        Ok(Self {
            units,
            height,
            width,
            data,
        })
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn unit(&self, k: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }
}

/// Final fully-connected weights, class-major (`C x K`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    classes: usize,
    units: usize,
    data: Vec<f32>,
}

impl ClassWeights {
    pub fn new(classes: usize, units: usize, data: Vec<f32>) -> Result<Self> {
        if classes == 0 || units == 0 {
            return Err(Error::Dimension(format!(
                "class weights must be non-empty, got {classes}x{units}"
            )));
        }
        if data.len() != classes * units {
            return Err(Error::Dimension(format!(
                "weight data has {} values, expected {classes}x{units}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("class weights must be finite".into()));
        }
        Ok(Self {
            classes,
            units,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, class_id: usize) -> &[f32] {
        &self.data[class_id * self.units..(class_id + 1) * self.units]
    }
}

/// Independent per-class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores(Vec<f32>);

impl ClassScores {
    pub fn new(probabilities: Vec<f32>) -> Result<Self> {
        if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("class probability {p} outside [0, 1]")));
        }
        Ok(Self(probabilities))
    }

    pub fn probabilities(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Class indices whose probability exceeds `threshold`.
    pub fn present(&self, threshold: f32) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > threshold)
            .map(|(c, _)| c)
            .collect()
    }
}

/// A non-negative per-class activation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    class_id: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl ResponseMap {
    pub fn new(class_id: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_grid(height, width, data.len())?;
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Contract(format!(
                "response values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            class_id,
            height,
            width,
            data,
            normalized: false,
        })
    }

    pub fn zeros(class_id: usize, height: usize, width: usize) -> Self {
        Self {
            class_id,
            height,
            width,
            data: vec![0.0; height * width],
            normalized: false,
        }
    }

    /// Marks the map as normalized after checking that it is (max 1 or all zero).
    pub fn assume_normalized(mut self) -> Result<Self> {
        let max = self.max();
        if max != 0.0 && (max - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "map claimed normalized but its maximum is {max}"
            )));
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn class_id(&self) -> usize {
        self.class_id
    }

    pub fn with_class_id(mut self, class_id: usize) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Scales a map so its maximum is 1. All-zero maps are returned unchanged.
pub fn normalize(map: &ResponseMap) -> Result<ResponseMap> {
    if let Some(v) = map.data.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Contract(format!("cannot normalize value {v}")));
    }
    let max = map.max();
    let data = if max > 0.0 {
        map.data.iter().map(|v| v / max).collect()
    } else {
        map.data.clone()
    };
    Ok(ResponseMap {
        class_id: map.class_id,
        height: map.height,
        width: map.width,
        data,
        normalized: true,
    })
}

/// Soft saliency in `[0, 1]` from an external salient-object detector.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_grid(height, width, data.len())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Integer class-index grid. 0 is background, `1..=C` are classes, 255 is ignored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_grid(height, width, data.len())?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    /// Checks every value is `0..=max_class` or [`IGNORE`].
    pub fn validate(&self, max_class: u8) -> Result<()> {
        match self.data.iter().find(|&&v| v > max_class && v != IGNORE) {
            Some(&value) => Err(Error::LabelOutOfRange {
                value,
                max: max_class,
            }),
            None => Ok(()),
        }
    }

    /// Sorted distinct foreground labels present in the map.
    pub fn foreground_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..IGNORE).filter(|&v| seen[v as usize]).collect()
    }
}

fn check_grid(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!("grid must be non-empty, got {height}x{width}")));
    }
    if len != height * width {
        return Err(Error::Dimension(format!(
            "grid data has {len} values, expected {height}x{width}"
        )));
    }
    Ok(())
}

/// Axis-aligned rectangle in pixel coordinates; `bottom()` and `right()` are exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    /// Rectangle spanning rows `top..bottom` and columns `left..right`.
    pub fn from_bounds(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Self::new(top, left, bottom - top, right - left)
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom()).contains(&row) && (self.left..self.right()).contains(&col)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub(crate) fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bottom() > height || self.right() > width {
            return Err(Error::Dimension(format!(
                "rectangle {self:?} does not fit a {height}x{width} image"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    SingleClass,
    TwoClass,
    MultiClass,
}

/// Patches produced by a split, in the order top-left, top-right, bottom-left, bottom-right.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub patches: Vec<Rect>,
    pub mode: SplitMode,
    pub overlap: Option<Rect>,
}

/// Maps that can be resampled onto a new grid.
pub trait Resample: Sized {
    fn grid(&self) -> (usize, usize, &[f32]);
    fn with_grid(&self, height: usize, width: usize, data: Vec<f32>) -> Self;
}

impl Resample for ResponseMap {
    fn grid(&self) -> (usize, usize, &[f32]) {
        (self.height, self.width, &self.data)
    }

    fn with_grid(&self, height: usize, width: usize, data: Vec<f32>) -> Self {
        ResponseMap {
            class_id: self.class_id,
            height,
            width,
            data,
            normalized: false,
        }
    }
}

impl Resample for SaliencyMap {
    fn grid(&self) -> (usize, usize, &[f32]) {
        (self.height, self.width, &self.data)
    }

    fn with_grid(&self, height: usize, width: usize, data: Vec<f32>) -> Self {
        SaliencyMap {
            height,
            width,
            data,
        }
    }
}

/// Bilinear resize with corner-aligned sampling: output corners land exactly on input corners.
///
/// A resized response map is no longer flagged normalized, since interpolation
/// can move the maximum.
pub fn resize_bilinear<M: Resample>(map: &M, out_h: usize, out_w: usize) -> Result<M> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!(
            "resize target must be non-empty, got {out_h}x{out_w}"
        )));
    }
    let (h, w, data) = map.grid();
    if (h, w) == (out_h, out_w) {
        return Ok(map.with_grid(h, w, data.to_vec()));
    }
    Ok(map.with_grid(out_h, out_w, resize_plane(data, h, w, out_h, out_w)))
}

pub(crate) fn resize_plane(data: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|i| source_coord(i, h, out_h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|j| source_coord(j, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let v00 = data[y0 * w + x0] as f64;
            let v01 = data[y0 * w + x1] as f64;
            let v10 = data[y1 * w + x0] as f64;
            let v11 = data[y1 * w + x1] as f64;
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            out.push((top + (bottom - top) * fy) as f32);
        }
    }
    out
}

fn source_coord(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    if src == 1 || dst == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
    let lo = (pos.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, data: Vec<f32>) -> ResponseMap {
        ResponseMap::new(0, h, w, data).unwrap()
    }

    #[test]
    fn constant_field_is_a_fixed_point() {
        let m = map(2, 2, vec![0.5; 4]);
        for (h, w) in [(1, 1), (3, 7), (16, 5)] {
            let r = resize_bilinear(&m, h, w).unwrap();
            assert!(r.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn identity_resize_is_bitwise() {
        let data: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let m = map(3, 4, data.clone());
        assert_eq!(resize_bilinear(&m, 3, 4).unwrap().data(), &data[..]);
    }

    #[test]
    fn ramp_matches_scalar_interpolation() {
        let m = map(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        let r = resize_bilinear(&m, 2, 4).unwrap();
        // column j samples x = j / 3 under corner alignment
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in 0..2 {
            for (col, e) in expected.iter().enumerate() {
                assert!((r.get(row, col) as f64 - e).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_size_resize_is_rejected() {
        let m = map(2, 2, vec![0.0; 4]);
        assert!(matches!(resize_bilinear(&m, 0, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn normalize_divides_by_max() {
        let m = map(1, 3, vec![4.0, 2.0, 0.0]);
        let n = normalize(&m).unwrap();
        assert_eq!(n.data(), &[1.0, 0.5, 0.0]);
        assert!(n.is_normalized());
    }

    #[test]
    fn normalize_all_zero_is_flagged() {
        let n = normalize(&ResponseMap::zeros(2, 3, 3)).unwrap();
        assert!(n.is_all_zero());
        assert!(n.is_normalized());
        assert_eq!(n.class_id(), 2);
    }

    #[test]
    fn normalize_matches_scalar_loop() {
        let data: Vec<f32> = (0..64).map(|i| ((i * 37 % 101) as f32) / 13.0).collect();
        let m = map(8, 8, data.clone());
        let n = normalize(&m).unwrap();
        let mut max = 0f32;
        for &v in &data {
            if v > max {
                max = v;
            }
        }
        for (i, &v) in data.iter().enumerate() {
            assert_eq!(n.data()[i], v / max);
        }
    }

    #[test]
    fn negative_values_violate_the_contract() {
        assert!(matches!(
            ResponseMap::new(0, 1, 2, vec![0.5, -0.1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mean_color_matches_naive_loop() {
        let (h, w) = (5, 7);
        let data: Vec<f32> = (0..h * w * 3).map(|i| ((i * 29 % 97) as f32) / 96.0).collect();
        let img = ImageTensor::new(h, w, data).unwrap();
        for c in 0..3 {
            let mut sum = 0.0f64;
            for r in 0..h {
                for col in 0..w {
                    sum += img.pixel(r, col)[c] as f64;
                }
            }
            assert!((sum / (h * w) as f64 - img.mean_color()[c] as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn image_rejects_out_of_range_values() {
        assert!(ImageTensor::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImageTensor::new(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn crop_copies_the_window() {
        let data: Vec<f32> = (0..4 * 4 * 3).map(|i| i as f32 / 47.0).collect();
        let img = ImageTensor::new(4, 4, data).unwrap();
        let crop = img.crop(&Rect::new(1, 2, 2, 2)).unwrap();
        assert_eq!(crop.pixel(0, 0), img.pixel(1, 2));
        assert_eq!(crop.pixel(1, 1), img.pixel(2, 3));
        assert!(img.crop(&Rect::new(3, 3, 2, 1)).is_err());
    }

    #[test]
    fn label_validation() {
        let labels = LabelMap::new(1, 4, vec![0, 2, IGNORE, 1]).unwrap();
        assert!(labels.validate(2).is_ok());
        assert!(matches!(
            labels.validate(1),
            Err(Error::LabelOutOfRange { value: 2, max: 1 })
        ));
        assert_eq!(labels.foreground_classes(), vec![1, 2]);
    }

    fn arb_map() -> impl Strategy<Value = ResponseMap> {
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0f32..10.0, h * w).prop_map(move |d| map(h, w, d))
        })
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(m in arb_map()) {
            let once = normalize(&m).unwrap();
            let twice = normalize(&once).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn resize_stays_within_input_bounds(m in arb_map(), oh in 1usize..20, ow in 1usize..20) {
            let lo = m.data().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = m.max();
            let r = resize_bilinear(&m, oh, ow).unwrap();
            for &v in r.data() {
                prop_assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }
}
