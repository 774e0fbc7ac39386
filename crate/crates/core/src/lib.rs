//! Inference-time refinement of class activation maps from a frozen
//! classifier, pseudo-label generation and evaluation, and a reference
//! implementation of the saliency-modulated segmentation loss.

pub mod backend;
pub mod condinfer;
pub mod dataio;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod pseudo;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    normalize, resize_bilinear, ClassScores, ClassWeights, FeatureStack, ImageTensor, LabelMap,
    Rect, ResponseMap, SaliencyMap, SplitMode, SplitSpec, IGNORE, MIN_PATCH,
};
