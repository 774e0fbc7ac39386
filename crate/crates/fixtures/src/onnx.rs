//! Serializes a [`NetRecipe`] as an ONNX graph.

use prost::Message;
use tract_onnx::pb::{
    attribute_proto::AttributeType, tensor_proto::DataType, tensor_shape_proto, type_proto,
    AttributeProto, GraphProto, ModelProto, NodeProto, OperatorSetIdProto, TensorProto,
    TensorShapeProto, TypeProto, ValueInfoProto,
};

use crate::net::{NetRecipe, CLASSES, POOL, UNITS};

fn tensor(name: &str, dims: &[i64], values: &[f32]) -> TensorProto {
    TensorProto {
        name: name.into(),
        dims: dims.to_vec(),
        data_type: DataType::Float as i32,
        raw_data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ..Default::default()
    }
}

fn ints(name: &str, values: &[i64]) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: AttributeType::Ints as i32,
        ints: values.to_vec(),
        ..Default::default()
    }
}

fn int(name: &str, value: i64) -> AttributeProto {
    AttributeProto {
        name: name.into(),
        r#type: AttributeType::Int as i32,
        i: value,
        ..Default::default()
    }
}

fn node(op: &str, inputs: &[&str], output: &str, attribute: Vec<AttributeProto>) -> NodeProto {
    NodeProto {
        name: output.into(),
        op_type: op.into(),
        input: inputs.iter().map(|s| s.to_string()).collect(),
        output: vec![output.into()],
        attribute,
        ..Default::default()
    }
}

fn value_info(name: &str, dims: &[Option<i64>]) -> ValueInfoProto {
    use tensor_shape_proto::{dimension::Value, Dimension};
    let dim = dims
        .iter()
        .enumerate()
        .map(|(i, d)| Dimension {
            value: Some(match d {
                Some(v) => Value::DimValue(*v),
                None => Value::DimParam(format!("d{i}")),
            }),
            ..Default::default()
        })
        .collect();
    ValueInfoProto {
        name: name.into(),
        r#type: Some(TypeProto {
            value: Some(type_proto::Value::TensorType(type_proto::Tensor {
                elem_type: DataType::Float as i32,
                shape: Some(TensorShapeProto { dim }),
            })),
            ..Default::default()
        }),
        ..Default::default()
    }
}

pub fn model_proto(net: &NetRecipe) -> ModelProto {
    let flat = |rows: &[[f32; 3]]| rows.iter().flatten().copied().collect::<Vec<f32>>();
    let units = UNITS as i64;
    let initializer = vec![
        tensor("conv1_weight", &[3, 3, 1, 1], &flat(&net.conv1_weight)),
        tensor("conv1_bias", &[3], &net.conv1_bias),
        tensor("mix_weight", &[3, 3, 1, 1], &flat(&net.mix_weight)),
        tensor("conv2_weight", &[units, 3, 1, 1], &flat(&net.conv2_weight)),
        tensor("conv2_bias", &[units], &net.conv2_bias),
        tensor("gate_weight", &[1, 3, 1, 1], &net.gate_weight),
        tensor("gate_bias", &[1], &[net.gate_bias]),
        tensor("gate_target", &[units, 1, 1, 1], &net.gate_target),
        tensor(
            "fc_weight",
            &[CLASSES as i64, units],
            &net.fc_weight.iter().flatten().copied().collect::<Vec<_>>(),
        ),
        tensor("fc_bias", &[CLASSES as i64], &net.fc_bias),
    ];
    let pool = POOL as i64;
    let nodes = vec![
        node("Conv", &["image", "conv1_weight", "conv1_bias"], "detect", vec![]),
        node("Relu", &["detect"], "detect_relu", vec![]),
        node("Conv", &["detect_relu", "mix_weight"], "mixed", vec![]),
        node("Relu", &["mixed"], "mixed_relu", vec![]),
        node(
            "AveragePool",
            &["mixed_relu"],
            "cells",
            vec![ints("kernel_shape", &[pool, pool]), ints("strides", &[pool, pool])],
        ),
        node("Conv", &["cells", "conv2_weight", "conv2_bias"], "units", vec![]),
        node("GlobalMaxPool", &["cells"], "cells_max", vec![]),
        node("Conv", &["cells_max", "gate_weight", "gate_bias"], "gate_pre", vec![]),
        node("Relu", &["gate_pre"], "gate", vec![]),
        node("Conv", &["gate", "gate_target"], "inhibition", vec![]),
        node("Sub", &["units", "inhibition"], "gated", vec![]),
        node("Relu", &["gated"], "features", vec![]),
        node("GlobalAveragePool", &["features"], "pooled", vec![]),
        node("Flatten", &["pooled"], "flat", vec![int("axis", 1)]),
        node(
            "Gemm",
            &["flat", "fc_weight", "fc_bias"],
            "logits",
            vec![int("transB", 1)],
        ),
        node("Sigmoid", &["logits"], "scores", vec![]),
    ];
    ModelProto {
        ir_version: 7,
        producer_name: "camrefine-fixtures".into(),
        opset_import: vec![OperatorSetIdProto {
            domain: String::new(),
            version: 13,
        }],
        graph: Some(GraphProto {
            name: net.name.into(),
            node: nodes,
            initializer,
            input: vec![value_info("image", &[Some(1), Some(3), None, None])],
            output: vec![
                value_info("features", &[Some(1), Some(units), None, None]),
                value_info("scores", &[Some(1), Some(CLASSES as i64)]),
            ],
            ..Default::default()
        }),
        ..Default::default()
    }
}

pub fn model_bytes(net: &NetRecipe) -> Vec<u8> {
    model_proto(net).encode_to_vec()
}
