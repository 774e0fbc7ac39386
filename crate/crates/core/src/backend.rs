//! Frozen classifier backend: ONNX model loading, forward passes and CAM extraction.
//!
//! The model must end in global average pooling followed by a fully-connected
//! layer. The manifest names the tensor holding the penultimate features, the
//! score tensor and the `C x K` fully-connected weight initializer.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tract_onnx::pb::ModelProto;
use tract_onnx::prelude::*;

use crate::error::{Error, Result};
use crate::types::{
    normalize, resize_bilinear, resize_plane, ClassScores, ClassWeights, FeatureStack,
    ImageTensor, ResponseMap,
};

pub const DEFAULT_CLASSIFICATION_THRESHOLD: f32 = 0.5;

fn default_threshold() -> f32 {
    DEFAULT_CLASSIFICATION_THRESHOLD
}

/// Model manifest, stored as TOML next to the model file.
///
/// ```toml
/// input = "image"                  # NCHW float input, RGB order
/// feature_output = "features"      # 1 x K x h x w, after the last activation
/// score_output = "scores"          # 1 x C
/// weight_tensor = "fc.weight"      # C x K initializer of the final layer
/// classes = 20
/// units = 4096
/// mean = [0.485, 0.456, 0.406]
/// std = [0.229, 0.224, 0.225]
/// classification_threshold = 0.5   # optional
/// scores_are_logits = false        # optional, apply a sigmoid to scores
/// input_height = 448               # optional, fixed network input size
/// input_width = 448
/// class_names = ["aeroplane", ...] # optional
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub input: String,
    pub feature_output: String,
    pub score_output: String,
    pub weight_tensor: String,
    pub classes: usize,
    pub units: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    #[serde(default = "default_threshold")]
    pub classification_threshold: f32,
    #[serde(default)]
    pub scores_are_logits: bool,
    #[serde(default)]
    pub input_height: Option<usize>,
    #[serde(default)]
    pub input_width: Option<usize>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
}

impl ModelManifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|message| Error::Manifest {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let manifest: ModelManifest = toml::from_str(text).map_err(|e| e.to_string())?;
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.classes == 0 || self.units == 0 {
            return Err("classes and units must be positive".into());
        }
        if !(self.classification_threshold > 0.0 && self.classification_threshold < 1.0) {
            return Err(format!(
                "classification_threshold {} outside (0, 1)",
                self.classification_threshold
            ));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err("std entries must be positive".into());
        }
        if self.input_height.is_some() != self.input_width.is_some() {
            return Err("input_height and input_width must be given together".into());
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.classes {
                return Err(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.classes
                ));
            }
        }
        Ok(())
    }
}

/// Scores and penultimate features from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardResult {
    pub scores: ClassScores,
    pub features: FeatureStack,
}

type Plan = Arc<TypedSimplePlan>;

/// A loaded, frozen classifier. Forward passes may run concurrently; an
/// optimized plan is built once per distinct input size and shared.
pub struct ClassifierHandle {
    path: PathBuf,
    manifest: ModelManifest,
    class_weights: ClassWeights,
    model: InferenceModel,
    plans: Mutex<HashMap<(usize, usize), Plan>>,
}

impl std::fmt::Debug for ClassifierHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClassifierHandle")
            .field("path", &self.path)
            .field("classes", &self.manifest.classes)
            .field("units", &self.manifest.units)
            .finish_non_exhaustive()
    }
}

pub fn load_model(path: &Path, manifest: &ModelManifest) -> Result<ClassifierHandle> {
    let model_err = |message: String| Error::Model {
        path: path.to_path_buf(),
        message,
    };
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let onnx = tract_onnx::onnx();
    let proto: ModelProto = onnx
        .proto_model_for_path(path)
        .map_err(|e| model_err(format!("cannot decode model: {e}")))?;
    let class_weights = read_class_weights(&proto, manifest).map_err(model_err)?;

    let mut model = onnx
        .model_for_proto_model(&proto)
        .map_err(|e| model_err(format!("cannot translate model: {e:#}")))?;
    let input_names: Vec<&str> = model
        .input_outlets()
        .map_err(|e| model_err(e.to_string()))?
        .iter()
        .map(|o| model.outlet_label(*o).unwrap_or(&model.node(o.node).name))
        .collect();
    if input_names != [manifest.input.as_str()] {
        return Err(model_err(format!(
            "expected a single input named {:?}, graph has {:?}",
            manifest.input, input_names
        )));
    }
    let mut outputs = Vec::with_capacity(2);
    for name in [&manifest.feature_output, &manifest.score_output] {
        let outlet = model
            .find_outlet_label(name)
            .ok_or_else(|| model_err(format!("tensor {name:?} not found in graph")))?;
        outputs.push(outlet);
    }
    model
        .select_output_outlets(&outputs)
        .map_err(|e| model_err(e.to_string()))?;

    Ok(ClassifierHandle {
        path: path.to_path_buf(),
        manifest: manifest.clone(),
        class_weights,
        model,
        plans: Mutex::new(HashMap::new()),
    })
}

fn read_class_weights(
    proto: &ModelProto,
    manifest: &ModelManifest,
) -> std::result::Result<ClassWeights, String> {
    let graph = proto.graph.as_ref().ok_or("model has no graph")?;
    let init = graph
        .initializer
        .iter()
        .find(|t| t.name == manifest.weight_tensor)
        .ok_or_else(|| format!("weight tensor {:?} not found in graph", manifest.weight_tensor))?;
    let expected = [manifest.classes as i64, manifest.units as i64];
    if init.dims != expected {
        return Err(format!(
            "weight tensor shape {:?} does not match declared {}x{}",
            init.dims, manifest.classes, manifest.units
        ));
    }
    const FLOAT: i32 = 1;
    if init.data_type != FLOAT {
        return Err(format!("weight tensor has element type {}, expected float32", init.data_type));
    }
    let data: Vec<f32> = if !init.raw_data.is_empty() {
        init.raw_data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    } else {
        init.float_data.clone()
    };
    ClassWeights::new(manifest.classes, manifest.units, data).map_err(|e| e.to_string())
}

impl ClassifierHandle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn class_count(&self) -> usize {
        self.manifest.classes
    }

    pub fn feature_unit_count(&self) -> usize {
        self.manifest.units
    }

    pub fn class_weights(&self) -> &ClassWeights {
        &self.class_weights
    }

    pub fn classification_threshold(&self) -> f32 {
        self.manifest.classification_threshold
    }

    fn backend_err(&self, message: impl Into<String>) -> Error {
        Error::Backend {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    fn plan_for(&self, height: usize, width: usize) -> Result<Plan> {
        if let Some(plan) = self.plans.lock().unwrap().get(&(height, width)) {
            return Ok(plan.clone());
        }
        // Built outside the lock; a concurrent duplicate build is harmless.
        let plan = self
            .model
            .clone()
            .with_input_fact(0, f32::fact([1, 3, height, width]).into())
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| self.backend_err(format!("cannot prepare {height}x{width} plan: {e:#}")))?;
        Ok(self
            .plans
            .lock()
            .unwrap()
            .entry((height, width))
            .or_insert(plan)
            .clone())
    }

    fn input_tensor(&self, image: &ImageTensor) -> (usize, usize, Tensor) {
        let (h, w) = match (self.manifest.input_height, self.manifest.input_width) {
            (Some(h), Some(w)) => (h, w),
            _ => (image.height(), image.width()),
        };
        let mut planes: Vec<Vec<f32>> = (0..3)
            .map(|c| image.data().iter().skip(c).step_by(3).copied().collect())
            .collect();
        if (h, w) != (image.height(), image.width()) {
            for plane in planes.iter_mut() {
                *plane = resize_plane(plane, image.height(), image.width(), h, w);
            }
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for (c, plane) in planes.iter().enumerate() {
            let (mean, std) = (self.manifest.mean[c], self.manifest.std[c]);
            data.extend(plane.iter().map(|v| (v - mean) / std));
        }
        let tensor = Tensor::from_shape(&[1, 3, h, w], &data).expect("shape matches data");
        (h, w, tensor)
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<ForwardResult> {
        let (h, w, input) = self.input_tensor(image);
        let plan = self.plan_for(h, w)?;
        let outputs = plan
            .run(tvec!(input.into()))
            .map_err(|e| self.backend_err(format!("forward pass failed: {e:#}")))?;

        let features = &outputs[0];
        let shape = features.shape();
        if shape.len() != 4 || shape[0] != 1 || shape[1] != self.manifest.units {
            return Err(self.backend_err(format!(
                "feature tensor has shape {shape:?}, expected [1, {}, h, w]",
                self.manifest.units
            )));
        }
        let (fh, fw) = (shape[2], shape[3]);
        let feature_data: Vec<f32> = features
            .to_plain_array_view::<f32>()
            .map_err(|e| self.backend_err(e.to_string()))?
            .iter()
            .copied()
            .collect();
        let features = FeatureStack::new(self.manifest.units, fh, fw, feature_data)
            .map_err(|e| self.backend_err(e.to_string()))?;

        let scores: Vec<f32> = outputs[1]
            .to_plain_array_view::<f32>()
            .map_err(|e| self.backend_err(e.to_string()))?
            .iter()
            .copied()
            .collect();
        if scores.len() != self.manifest.classes {
            return Err(self.backend_err(format!(
                "score tensor has {} values, expected {}",
                scores.len(),
                self.manifest.classes
            )));
        }
        let probabilities = if self.manifest.scores_are_logits {
            scores.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect()
        } else {
            scores.to_vec()
        };
        let scores = ClassScores::new(probabilities).map_err(|e| self.backend_err(e.to_string()))?;
        Ok(ForwardResult { scores, features })
    }
}

fn weighted_sum(features: &FeatureStack, weights: &ClassWeights, class_id: usize) -> Result<Vec<f32>> {
    if features.units() != weights.units() {
        return Err(Error::Dimension(format!(
            "features have {} units but weights expect {}",
            features.units(),
            weights.units()
        )));
    }
    if class_id >= weights.classes() {
        return Err(Error::Contract(format!(
            "class {class_id} out of range for {} classes",
            weights.classes()
        )));
    }
    let mut acc = vec![0f32; features.height() * features.width()];
    for (k, &w) in weights.row(class_id).iter().enumerate() {
        for (a, &f) in acc.iter_mut().zip(features.unit(k)) {
            *a += w * f;
        }
    }
    Ok(acc)
}

/// Class activation map at feature resolution: the class-weighted sum of
/// feature units, with negative evidence clamped to zero.
pub fn compute_cam(features: &FeatureStack, weights: &ClassWeights, class_id: usize) -> Result<ResponseMap> {
    let data = weighted_sum(features, weights, class_id)?
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    ResponseMap::new(class_id, features.height(), features.width(), data)
}

/// Lifts a raw CAM to image resolution and normalizes it.
pub fn lift_cam(cam: &ResponseMap, height: usize, width: usize) -> Result<ResponseMap> {
    normalize(&resize_bilinear(cam, height, width)?)
}

/// Normalized image-resolution response map for a class assumed present.
pub fn class_conditional_map(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    class_id: usize,
) -> Result<ResponseMap> {
    Ok(class_conditional_maps(handle, image, &[class_id])?.remove(0))
}

/// Response maps for several classes from a single forward pass.
pub fn class_conditional_maps(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    classes: &[usize],
) -> Result<Vec<ResponseMap>> {
    let forward = handle.forward(image)?;
    classes
        .iter()
        .map(|&c| {
            let cam = compute_cam(&forward.features, handle.class_weights(), c)?;
            lift_cam(&cam, image.height(), image.width())
        })
        .collect()
}

/// Classes to process: image-level labels when given, otherwise thresholded scores.
pub fn classes_to_process(
    handle: &ClassifierHandle,
    image: &ImageTensor,
    labels: Option<&[usize]>,
) -> Result<Vec<usize>> {
    match labels {
        Some(labels) => Ok(labels.to_vec()),
        None => Ok(handle
            .forward(image)?
            .scores
            .present(handle.classification_threshold())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stack(units: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureStack {
        FeatureStack::new(units, h, w, data).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_cam() {
        let f = stack(2, 2, 2, vec![1.0, -2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5]);
        let w = ClassWeights::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(compute_cam(&f, &w, 0).unwrap().is_all_zero());
    }

    #[test]
    fn single_unit_identity_is_clamped() {
        let f = stack(1, 1, 4, vec![1.5, -2.0, 0.0, 3.0]);
        let w = ClassWeights::new(1, 1, vec![1.0]).unwrap();
        assert_eq!(compute_cam(&f, &w, 0).unwrap().data(), &[1.5, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn unit_mismatch_is_rejected() {
        let f = stack(2, 1, 1, vec![1.0, 2.0]);
        let w = ClassWeights::new(1, 3, vec![1.0; 3]).unwrap();
        assert!(matches!(compute_cam(&f, &w, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn manifest_rejects_bad_threshold_and_unknown_keys() {
        let base = r#"
            input = "x"
            feature_output = "f"
            score_output = "s"
            weight_tensor = "w"
            classes = 2
            units = 4
            mean = [0.0, 0.0, 0.0]
            std = [1.0, 1.0, 1.0]
        "#;
        let m = ModelManifest::parse(base).unwrap();
        assert_eq!(m.classification_threshold, DEFAULT_CLASSIFICATION_THRESHOLD);
        assert!(ModelManifest::parse(&format!("{base}\nclassification_threshold = 1.0")).is_err());
        assert!(ModelManifest::parse(&format!("{base}\nbogus = 1")).is_err());
        assert!(ModelManifest::parse(&format!("{base}\ninput_height = 8")).is_err());
    }

    fn arb_case() -> impl Strategy<Value = (FeatureStack, Vec<f32>, Vec<f32>)> {
        (1usize..6, 1usize..5, 1usize..5).prop_flat_map(|(k, h, w)| {
            (
                proptest::collection::vec(-3f32..3.0, k * h * w),
                proptest::collection::vec(-2f32..2.0, k),
                proptest::collection::vec(-2f32..2.0, k),
            )
                .prop_map(move |(f, a, b)| (stack(k, h, w, f), a, b))
        })
    }

    proptest! {
        #[test]
        fn weighted_sum_is_linear_in_weights((f, a, b) in arb_case()) {
            let k = f.units();
            let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let wa = ClassWeights::new(1, k, a).unwrap();
            let wb = ClassWeights::new(1, k, b).unwrap();
            let ws = ClassWeights::new(1, k, sum).unwrap();
            let ma = weighted_sum(&f, &wa, 0).unwrap();
            let mb = weighted_sum(&f, &wb, 0).unwrap();
            let ms = weighted_sum(&f, &ws, 0).unwrap();
            for i in 0..ms.len() {
                prop_assert!((ms[i] - (ma[i] + mb[i])).abs() < 1e-5);
            }
        }

        #[test]
        fn cam_is_invariant_to_unit_permutation((f, a, _b) in arb_case(), seed in any::<u64>()) {
            let k = f.units();
            let n = f.height() * f.width();
            let mut perm: Vec<usize> = (0..k).collect();
            // deterministic shuffle from the seed
            let mut s = seed;
            for i in (1..k).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let mut pf = Vec::with_capacity(k * n);
            let mut pw = Vec::with_capacity(k);
            for &p in &perm {
                pf.extend_from_slice(f.unit(p));
                pw.push(a[p]);
            }
            let orig = compute_cam(&f, &ClassWeights::new(1, k, a.clone()).unwrap(), 0).unwrap();
            let permuted = compute_cam(
                &stack(k, f.height(), f.width(), pf),
                &ClassWeights::new(1, k, pw).unwrap(),
                0,
            ).unwrap();
            for i in 0..n {
                prop_assert!((orig.data()[i] - permuted.data()[i]).abs() < 1e-5);
            }
        }
    }
}
