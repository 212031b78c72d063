//! Graph-JSON schema v1: load, validate, and canonical save.
//!
//! Top level: `{name, inputs[], outputs[], tensors{}, weights{}, nodes[]}`.
//! Weight and Constant payloads are base64 little-endian 32-bit reals.
//! Canonical form has sorted object keys and nodes in the canonical
//! topological order, so `save(load(p))` is byte-identical for canonical
//! files.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::model::{DType, Graph, InputDecl, Node, OpSpec, Payload, TensorMeta};
use super::GraphError;

#[derive(Serialize, Deserialize)]
struct RawGraph {
    name: String,
    inputs: Vec<RawInput>,
    outputs: Vec<String>,
    tensors: BTreeMap<String, RawTensorMeta>,
    weights: BTreeMap<String, RawPayload>,
    nodes: Vec<RawNode>,
}

#[derive(Serialize, Deserialize)]
struct RawInput {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct RawTensorMeta {
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct RawPayload {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct RawNode {
    id: String,
    op: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attrs: Option<serde_json::Value>,
}

fn schema_err(pointer: impl Into<String>, message: impl Into<String>) -> GraphError {
    GraphError::Schema {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn decode_payload(raw: &RawPayload, pointer: &str) -> Result<Payload, GraphError> {
    let bytes = B64
        .decode(raw.data.as_bytes())
        .map_err(|e| schema_err(format!("{pointer}/data"), format!("bad base64: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(schema_err(
            format!("{pointer}/data"),
            format!("payload length {} is not a multiple of 4", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let expected: usize = raw.shape.iter().product();
    if expected != data.len() {
        return Err(schema_err(
            format!("{pointer}/shape"),
            format!(
                "shape implies {expected} elements, payload has {}",
                data.len()
            ),
        ));
    }
    Ok(Payload {
        shape: raw.shape.clone(),
        data,
    })
}

fn encode_payload(p: &Payload) -> RawPayload {
    let mut bytes = Vec::with_capacity(p.data.len() * 4);
    for &v in &p.data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    RawPayload {
        shape: p.shape.clone(),
        data: B64.encode(bytes),
    }
}

fn attr_f64(attrs: &serde_json::Value, key: &str, pointer: &str) -> Result<f64, GraphError> {
    attrs
        .get(key)
        .and_then(|v| v.as_f64())
        .ok_or_else(|| schema_err(format!("{pointer}/attrs/{key}"), "expected a number"))
}

fn attr_usize(attrs: &serde_json::Value, key: &str, pointer: &str) -> Result<usize, GraphError> {
    attrs
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| {
            schema_err(
                format!("{pointer}/attrs/{key}"),
                "expected a non-negative integer",
            )
        })
}

fn parse_op(raw: &RawNode, pointer: &str) -> Result<OpSpec, GraphError> {
    let attrs = raw.attrs.clone().unwrap_or(serde_json::Value::Null);
    let need_attrs = || -> Result<&serde_json::Value, GraphError> {
        if attrs.is_object() {
            Ok(&attrs)
        } else {
            Err(schema_err(
                format!("{pointer}/attrs"),
                format!("op {} requires an attrs object", raw.op),
            ))
        }
    };
    match raw.op.as_str() {
        "MatMul" => Ok(OpSpec::MatMul),
        "Add" => Ok(OpSpec::Add),
        "Mul" => Ok(OpSpec::Mul),
        "Gelu" => Ok(OpSpec::Gelu),
        "LayerNorm" => Ok(OpSpec::LayerNorm {
            epsilon: attr_f64(need_attrs()?, "epsilon", pointer)?,
        }),
        "Concat" => Ok(OpSpec::Concat {
            axis: attr_usize(need_attrs()?, "axis", pointer)?,
        }),
        "Slice" => Ok(OpSpec::Slice {
            axis: attr_usize(need_attrs()?, "axis", pointer)?,
            start: attr_usize(need_attrs()?, "start", pointer)?,
            end: attr_usize(need_attrs()?, "end", pointer)?,
        }),
        "Reshape" => {
            let shape = need_attrs()?
                .get("shape")
                .and_then(|v| v.as_array())
                .ok_or_else(|| schema_err(format!("{pointer}/attrs/shape"), "expected an array"))?
                .iter()
                .map(|v| {
                    v.as_u64().map(|u| u as usize).ok_or_else(|| {
                        schema_err(
                            format!("{pointer}/attrs/shape"),
                            "expected non-negative integers",
                        )
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(OpSpec::Reshape { shape })
        }
        "Constant" => {
            let value = need_attrs()?
                .get("value")
                .ok_or_else(|| schema_err(format!("{pointer}/attrs/value"), "missing payload"))?;
            let raw_payload: RawPayload = serde_json::from_value(value.clone()).map_err(|e| {
                schema_err(
                    format!("{pointer}/attrs/value"),
                    format!("bad payload: {e}"),
                )
            })?;
            decode_payload(&raw_payload, &format!("{pointer}/attrs/value"))
                .map(|value| OpSpec::Constant { value })
        }
        other => Err(schema_err(
            format!("{pointer}/op"),
            format!("unknown op kind '{other}' (node '{}')", raw.id),
        )),
    }
}

fn op_attrs_json(op: &OpSpec) -> Option<serde_json::Value> {
    match op {
        OpSpec::MatMul | OpSpec::Add | OpSpec::Mul | OpSpec::Gelu => None,
        OpSpec::LayerNorm { epsilon } => Some(serde_json::json!({ "epsilon": epsilon })),
        OpSpec::Concat { axis } => Some(serde_json::json!({ "axis": axis })),
        OpSpec::Slice { axis, start, end } => {
            Some(serde_json::json!({ "axis": axis, "start": start, "end": end }))
        }
        OpSpec::Reshape { shape } => Some(serde_json::json!({ "shape": shape })),
        OpSpec::Constant { value } => {
            let raw = encode_payload(value);
            Some(serde_json::json!({ "value": { "shape": raw.shape, "data": raw.data } }))
        }
    }
}

fn from_raw(raw: RawGraph) -> Result<Graph, GraphError> {
    let mut inputs = Vec::with_capacity(raw.inputs.len());
    for (i, ri) in raw.inputs.iter().enumerate() {
        let dtype = DType::parse(&ri.dtype).ok_or_else(|| {
            schema_err(
                format!("/inputs/{i}/dtype"),
                format!("unknown dtype '{}'", ri.dtype),
            )
        })?;
        inputs.push(InputDecl {
            name: ri.name.clone(),
            shape: ri.shape.clone(),
            dtype,
        });
    }
    let mut tensors = BTreeMap::new();
    for (name, tm) in &raw.tensors {
        let dtype = DType::parse(&tm.dtype).ok_or_else(|| {
            schema_err(
                format!("/tensors/{name}/dtype"),
                format!("unknown dtype '{}'", tm.dtype),
            )
        })?;
        tensors.insert(
            name.clone(),
            TensorMeta {
                shape: tm.shape.clone(),
                dtype,
            },
        );
    }
    let mut weights = BTreeMap::new();
    for (name, rp) in &raw.weights {
        weights.insert(
            name.clone(),
            decode_payload(rp, &format!("/weights/{name}"))?,
        );
    }
    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for (i, rn) in raw.nodes.iter().enumerate() {
        let op = parse_op(rn, &format!("/nodes/{i}"))?;
        nodes.push(Node {
            id: rn.id.clone(),
            op,
            inputs: rn.inputs.clone(),
            outputs: rn.outputs.clone(),
        });
    }
    let g = Graph {
        name: raw.name,
        inputs,
        outputs: raw.outputs,
        tensors,
        weights,
        nodes,
    };
    g.validate()?;
    Ok(g)
}

fn to_raw(g: &Graph) -> RawGraph {
    RawGraph {
        name: g.name.clone(),
        inputs: g
            .inputs
            .iter()
            .map(|i| RawInput {
                name: i.name.clone(),
                shape: i.shape.clone(),
                dtype: i.dtype.as_str().into(),
            })
            .collect(),
        outputs: g.outputs.clone(),
        tensors: g
            .tensors
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    RawTensorMeta {
                        shape: v.shape.clone(),
                        dtype: v.dtype.as_str().into(),
                    },
                )
            })
            .collect(),
        weights: g
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), encode_payload(v)))
            .collect(),
        nodes: g
            .nodes
            .iter()
            .map(|n| RawNode {
                id: n.id.clone(),
                op: n.op.kind().into(),
                inputs: n.inputs.clone(),
                outputs: n.outputs.clone(),
                attrs: op_attrs_json(&n.op),
            })
            .collect(),
    }
}

/// Canonical JSON text: sorted keys (serde_json maps are ordered), nodes in
/// canonical topological order, two-space pretty printing.
pub fn to_canonical_json(g: &Graph) -> Result<String, GraphError> {
    let mut g = g.clone();
    g.canonicalize()?;
    let value = serde_json::to_value(to_raw(&g))?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    Ok(text)
}

pub fn parse_graph_json(text: &str) -> Result<Graph, GraphError> {
    let raw: RawGraph = serde_json::from_str(text)?;
    from_raw(raw)
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph, GraphError> {
    let text = std::fs::read_to_string(path)?;
    parse_graph_json(&text)
}

pub fn save_graph(g: &Graph, path: impl AsRef<Path>) -> Result<(), GraphError> {
    std::fs::write(path, to_canonical_json(g)?)?;
    Ok(())
}
