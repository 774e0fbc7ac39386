//! The fixture classifier.
//!
//! Input pixels are normalized as `(x - 0.5) / 0.5`, so a 1x1 convolution with
//! weights `[0.5, 0, -0.5]` reads `R - B` in the original `[0, 1]` range.
//! Three per-pixel detectors feed a 4x4 average pool:
//!
//! * `a = relu(R - B - 0.6)`, strong red
//! * `b = relu(relu(R - B) - 3a)`, weak red only; zero on pure red
//! * `c = relu(B - R)`, blue
//!
//! The four feature units are `2.5 a`, `b` minus a global gate, `c` and a
//! constant 0.25. The gate is `relu(10 max(a) - 2.5)`, so weak red only
//! registers while no pooled cell holds more than a quarter of strong red.

use serde::Serialize;

pub const POOL: usize = 4;
pub const UNITS: usize = 4;
pub const CLASSES: usize = 2;
pub const MEAN: f32 = 0.5;
pub const STD: f32 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NetRecipe {
    pub name: &'static str,
    /// Output channel by input channel.
    pub conv1_weight: [[f32; 3]; 3],
    pub conv1_bias: [f32; 3],
    /// Second per-pixel stage, applied before pooling.
    pub mix_weight: [[f32; 3]; 3],
    pub conv2_weight: [[f32; 3]; UNITS],
    pub conv2_bias: [f32; UNITS],
    pub gate_weight: [f32; 3],
    pub gate_bias: f32,
    /// How strongly the gate is subtracted from each unit.
    pub gate_target: [f32; UNITS],
    pub fc_weight: [[f32; UNITS]; CLASSES],
    pub fc_bias: [f32; CLASSES],
}

fn base(name: &'static str, fc_weight: [[f32; UNITS]; CLASSES]) -> NetRecipe {
    NetRecipe {
        name,
        conv1_weight: [[0.5, 0.0, -0.5], [0.5, 0.0, -0.5], [-0.5, 0.0, 0.5]],
        conv1_bias: [-0.6, 0.0, 0.0],
        mix_weight: [[1.0, 0.0, 0.0], [-3.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        conv2_weight: [
            [2.5, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0],
        ],
        conv2_bias: [0.0, 0.0, 0.0, 0.25],
        gate_weight: [10.0, 0.0, 0.0],
        gate_bias: -2.5,
        gate_target: [0.0, 1.0, 0.0, 0.0],
        fc_weight,
        fc_bias: [-0.02, -1.0],
    }
}

/// Class 0 ("blob") reads both red units, weak red weighted up; class 1 ("sky") reads blue.
pub fn two_blob() -> NetRecipe {
    base("two_blob", [[1.0, 3.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
}

/// Class 0 weighs every unit equally, so a featureless image gives a constant map.
pub fn flat() -> NetRecipe {
    base("flat", [[0.5, 0.5, 0.5, 0.5], [0.0, 0.0, 1.0, 0.0]])
}

pub fn all() -> Vec<NetRecipe> {
    vec![two_blob(), flat()]
}

pub const CLASS_NAMES: [&str; CLASSES] = ["blob", "sky"];

/// Model manifest in the backend's TOML format.
pub fn manifest_toml() -> String {
    format!(
        "input = \"image\"\n\
         feature_output = \"features\"\n\
         score_output = \"scores\"\n\
         weight_tensor = \"fc_weight\"\n\
         classes = {CLASSES}\n\
         units = {UNITS}\n\
         mean = [{MEAN:?}, {MEAN:?}, {MEAN:?}]\n\
         std = [{STD:?}, {STD:?}, {STD:?}]\n\
         classification_threshold = 0.5\n\
         class_names = [\"{}\", \"{}\"]\n",
        CLASS_NAMES[0], CLASS_NAMES[1]
    )
}
