//! Reference interpreter: topological evaluation with 64-bit accumulation.
//!
//! Deterministic by construction; within one call execution is
//! single-threaded. Declared tensor shapes are checked as nodes produce
//! them.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

use super::model::{Graph, OpSpec};
use super::GraphError;

const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

/// tanh-form GELU; the generator and interpreter share this definition.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + f64::tanh(SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)))
}

fn layer_norm(x: &Tensor, scale: &Tensor, bias: &Tensor, epsilon: f64) -> Result<Tensor, String> {
    if x.rank() < 1 {
        return Err("LayerNorm input must have rank >= 1".into());
    }
    let width = *x.shape().last().unwrap();
    if scale.len() != width || bias.len() != width {
        return Err(format!(
            "LayerNorm scale/bias length must equal last axis ({width}), got {} / {}",
            scale.len(),
            bias.len()
        ));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(width) {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let inv = 1.0 / (var + epsilon).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * scale.data()[i] + bias.data()[i];
        }
    }
    Ok(out)
}

fn eval_node(op: &OpSpec, inputs: &[&Tensor]) -> Result<Tensor, String> {
    match op {
        OpSpec::MatMul => inputs[0].matmul(inputs[1]).map_err(|e| e.to_string()),
        OpSpec::Add => inputs[0].add(inputs[1]).map_err(|e| e.to_string()),
        OpSpec::Mul => inputs[0].mul(inputs[1]).map_err(|e| e.to_string()),
        OpSpec::Gelu => Ok(inputs[0].map(gelu)),
        OpSpec::LayerNorm { epsilon } => layer_norm(inputs[0], inputs[1], inputs[2], *epsilon),
        OpSpec::Concat { axis } => Tensor::concat(inputs, *axis).map_err(|e| e.to_string()),
        OpSpec::Slice { axis, start, end } => inputs[0]
            .slice(*axis, *start, *end)
            .map_err(|e| e.to_string()),
        OpSpec::Reshape { shape } => inputs[0].reshape(shape.clone()).map_err(|e| e.to_string()),
        OpSpec::Constant { value } => {
            Tensor::new(value.shape.clone(), value.data.clone()).map_err(|e| e.to_string())
        }
    }
}

fn run(
    g: &Graph,
    feeds: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, GraphError> {
    for name in feeds.keys() {
        if !g.is_input(name) {
            return Err(GraphError::UnknownFeed(name.clone()));
        }
    }
    let mut values: BTreeMap<String, Tensor> = BTreeMap::new();
    for decl in &g.inputs {
        let t = feeds
            .get(&decl.name)
            .ok_or_else(|| GraphError::MissingFeed(decl.name.clone()))?;
        if t.shape() != decl.shape.as_slice() {
            return Err(GraphError::ShapeMismatch {
                site: format!("input '{}'", decl.name),
                expected: decl.shape.clone(),
                actual: t.shape().to_vec(),
            });
        }
        values.insert(decl.name.clone(), t.clone());
    }
    for (name, w) in &g.weights {
        values.insert(
            name.clone(),
            Tensor::new(w.shape.clone(), w.data.clone()).map_err(|e| GraphError::NodeEval {
                node: format!("weight '{name}'"),
                message: e.to_string(),
            })?,
        );
    }
    let order = g.canonical_topo_order()?;
    for i in order {
        let node = &g.nodes[i];
        let inputs: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|n| {
                values.get(n).ok_or_else(|| GraphError::NodeEval {
                    node: node.id.clone(),
                    message: format!("input tensor '{n}' unavailable"),
                })
            })
            .collect::<Result<_, _>>()?;
        let out = eval_node(&node.op, &inputs).map_err(|message| GraphError::NodeEval {
            node: node.id.clone(),
            message,
        })?;
        if let Some(meta) = g.tensors.get(node.output()) {
            if out.shape() != meta.shape.as_slice() {
                return Err(GraphError::ShapeMismatch {
                    site: format!("node '{}' output '{}'", node.id, node.output()),
                    expected: meta.shape.clone(),
                    actual: out.shape().to_vec(),
                });
            }
        }
        values.insert(node.output().to_string(), out);
    }
    Ok(values)
}

/// Evaluate the graph and return its declared outputs.
pub fn interpret(
    g: &Graph,
    feeds: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, GraphError> {
    let mut values = run(g, feeds)?;
    let mut out = BTreeMap::new();
    for name in &g.outputs {
        let t = values.remove(name).ok_or_else(|| GraphError::NodeEval {
            node: format!("output '{name}'"),
            message: "not produced".into(),
        })?;
        out.insert(name.clone(), t);
    }
    Ok(out)
}

/// Evaluate the graph and return every tensor, including intermediates.
/// Used by the equivalence validator to capture module boundary values.
pub fn interpret_all(
    g: &Graph,
    feeds: &BTreeMap<String, Tensor>,
) -> Result<BTreeMap<String, Tensor>, GraphError> {
    run(g, feeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::model::{DType, InputDecl, Node, Payload, TensorMeta};

    fn meta(shape: &[usize]) -> TensorMeta {
        TensorMeta {
            shape: shape.to_vec(),
            dtype: DType::F32,
        }
    }

    fn input(name: &str, shape: &[usize]) -> InputDecl {
        InputDecl {
            name: name.into(),
            shape: shape.to_vec(),
            dtype: DType::F32,
        }
    }

    #[test]
    fn identity_reshape_returns_feed() {
        let g = Graph {
            name: "r".into(),
            inputs: vec![input("x", &[2, 3])],
            outputs: vec!["y".into()],
            tensors: BTreeMap::from([("y".to_string(), meta(&[3, 2]))]),
            weights: BTreeMap::new(),
            nodes: vec![Node {
                id: "r0".into(),
                op: OpSpec::Reshape { shape: vec![3, 2] },
                inputs: vec!["x".into()],
                outputs: vec!["y".into()],
            }],
        };
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let out = interpret(&g, &BTreeMap::from([("x".to_string(), x.clone())])).unwrap();
        assert_eq!(out["y"].data(), x.data());
        assert_eq!(out["y"].shape(), &[3, 2]);
    }

    #[test]
    fn matmul_identity_times_x() {
        let g = Graph {
            name: "m".into(),
            inputs: vec![input("x", &[2, 2])],
            outputs: vec!["y".into()],
            tensors: BTreeMap::from([("y".to_string(), meta(&[2, 2]))]),
            weights: BTreeMap::from([(
                "eye".to_string(),
                Payload {
                    shape: vec![2, 2],
                    data: vec![1.0, 0.0, 0.0, 1.0],
                },
            )]),
            nodes: vec![Node {
                id: "mm".into(),
                op: OpSpec::MatMul,
                inputs: vec!["eye".into(), "x".into()],
                outputs: vec!["y".into()],
            }],
        };
        let x = Tensor::new(vec![2, 2], vec![5.0, -1.0, 2.0, 3.0]).unwrap();
        let out = interpret(&g, &BTreeMap::from([("x".to_string(), x.clone())])).unwrap();
        assert_eq!(out["y"], x);
    }

    #[test]
    fn missing_feed_is_reported() {
        let g = Graph {
            name: "m".into(),
            inputs: vec![input("x", &[1])],
            outputs: vec![],
            tensors: BTreeMap::new(),
            weights: BTreeMap::new(),
            nodes: vec![],
        };
        assert!(matches!(
            interpret(&g, &BTreeMap::new()),
            Err(GraphError::MissingFeed(_))
        ));
    }

    #[test]
    fn declared_shape_mismatch_names_node() {
        let g = Graph {
            name: "m".into(),
            inputs: vec![input("x", &[2, 3])],
            outputs: vec!["y".into()],
            // wrong declared shape: Gelu preserves [2, 3]
            tensors: BTreeMap::from([("y".to_string(), meta(&[3, 3]))]),
            weights: BTreeMap::new(),
            nodes: vec![Node {
                id: "g".into(),
                op: OpSpec::Gelu,
                inputs: vec!["x".into()],
                outputs: vec!["y".into()],
            }],
        };
        let x = Tensor::zeros(vec![2, 3]);
        let err = interpret(&g, &BTreeMap::from([("x".to_string(), x)])).unwrap_err();
        assert!(err.to_string().contains("node 'g'"), "{err}");
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 4.0]).unwrap();
        let scale = Tensor::filled(vec![4], 1.0);
        let bias = Tensor::zeros(vec![4]);
        let out = layer_norm(&x, &scale, &bias, 0.0).unwrap();
        for row in out.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.8411919906082768).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-6);
    }
}
