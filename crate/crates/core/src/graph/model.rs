//! Typed in-memory graph model and structural validation.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use sha2::{Digest, Sha256};

use super::GraphError;

/// Storage dtype of a tensor payload. Math always runs in f64; `F32`
/// describes the on-disk encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
}

impl DType {
    pub fn as_str(&self) -> &'static str {
        match self {
            DType::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            _ => None,
        }
    }
}

/// Shape and dtype of a named intermediate tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// A declared graph input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// A constant payload: weight initializer or Constant-node value. Values
/// are held as f64 widened from the 32-bit on-disk encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Payload {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Round to f32 and widen back, matching a store/load cycle.
    pub fn quantized(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let data = data.into_iter().map(|v| v as f32 as f64).collect();
        Self { shape, data }
    }
}

/// Operation with its attribute schema. The op set is closed.
#[derive(Debug, Clone, PartialEq)]
pub enum OpSpec {
    MatMul,
    Add,
    Mul,
    LayerNorm {
        epsilon: f64,
    },
    Gelu,
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Constant {
        value: Payload,
    },
}

impl OpSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            OpSpec::MatMul => "MatMul",
            OpSpec::Add => "Add",
            OpSpec::Mul => "Mul",
            OpSpec::LayerNorm { .. } => "LayerNorm",
            OpSpec::Gelu => "Gelu",
            OpSpec::Concat { .. } => "Concat",
            OpSpec::Slice { .. } => "Slice",
            OpSpec::Reshape { .. } => "Reshape",
            OpSpec::Constant { .. } => "Constant",
        }
    }

    /// Expected input arity, if fixed for the kind.
    pub fn arity(&self) -> Option<usize> {
        match self {
            OpSpec::MatMul | OpSpec::Add | OpSpec::Mul => Some(2),
            OpSpec::LayerNorm { .. } => Some(3),
            OpSpec::Gelu | OpSpec::Slice { .. } | OpSpec::Reshape { .. } => Some(1),
            OpSpec::Constant { .. } => Some(0),
            OpSpec::Concat { .. } => None,
        }
    }

    /// Stable digest of kind and attributes, used as the initial color for
    /// isomorphism checks. Constant values participate, so constants with
    /// different payloads never align.
    pub fn attr_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.kind().as_bytes());
        match self {
            OpSpec::LayerNorm { epsilon } => h.update(epsilon.to_le_bytes()),
            OpSpec::Concat { axis } => h.update((*axis as u64).to_le_bytes()),
            OpSpec::Slice { axis, start, end } => {
                h.update((*axis as u64).to_le_bytes());
                h.update((*start as u64).to_le_bytes());
                h.update((*end as u64).to_le_bytes());
            }
            OpSpec::Reshape { shape } => {
                for d in shape {
                    h.update((*d as u64).to_le_bytes());
                }
            }
            OpSpec::Constant { value } => {
                for d in &value.shape {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in &value.data {
                    h.update(v.to_le_bytes());
                }
            }
            _ => {}
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// One graph node. All ops in the closed set produce a single output.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: OpSpec,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Node {
    pub fn output(&self) -> &str {
        &self.outputs[0]
    }
}

/// DAG of typed tensor ops with shared weight references.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub name: String,
    pub inputs: Vec<InputDecl>,
    pub outputs: Vec<String>,
    pub tensors: BTreeMap<String, TensorMeta>,
    pub weights: BTreeMap<String, Payload>,
    pub nodes: Vec<Node>,
}

impl Graph {
    /// Structural validation: unique ids and tensor names, resolvable
    /// inputs, arity per op kind, declared metadata for node outputs, and
    /// DAG-ness. Returns the canonical topological order of node indices.
    pub fn validate(&self) -> Result<Vec<usize>, GraphError> {
        let mut ids = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !ids.insert(n.id.as_str()) {
                return Err(GraphError::Schema {
                    pointer: format!("/nodes/{i}/id"),
                    message: format!("duplicate node id '{}'", n.id),
                });
            }
            if n.outputs.len() != 1 {
                return Err(GraphError::Schema {
                    pointer: format!("/nodes/{i}/outputs"),
                    message: format!(
                        "node '{}' must have exactly 1 output, has {}",
                        n.id,
                        n.outputs.len()
                    ),
                });
            }
            if let Some(arity) = n.op.arity() {
                if n.inputs.len() != arity {
                    return Err(GraphError::Schema {
                        pointer: format!("/nodes/{i}/inputs"),
                        message: format!(
                            "op {} expects {} inputs, node '{}' has {}",
                            n.op.kind(),
                            arity,
                            n.id,
                            n.inputs.len()
                        ),
                    });
                }
            } else if n.inputs.is_empty() {
                return Err(GraphError::Schema {
                    pointer: format!("/nodes/{i}/inputs"),
                    message: format!("op {} needs at least one input", n.op.kind()),
                });
            }
        }

        let mut producers: HashMap<&str, usize> = HashMap::new();
        let mut available: BTreeSet<&str> = BTreeSet::new();
        for inp in &self.inputs {
            available.insert(inp.name.as_str());
        }
        for w in self.weights.keys() {
            if available.contains(w.as_str()) {
                return Err(GraphError::Schema {
                    pointer: format!("/weights/{w}"),
                    message: "weight name collides with a graph input".into(),
                });
            }
            available.insert(w.as_str());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let out = n.output();
            if available.contains(out) || producers.contains_key(out) {
                return Err(GraphError::Schema {
                    pointer: format!("/nodes/{i}/outputs/0"),
                    message: format!("tensor '{out}' produced or declared more than once"),
                });
            }
            producers.insert(out, i);
            if !self.tensors.contains_key(out) {
                return Err(GraphError::Schema {
                    pointer: format!("/tensors/{out}"),
                    message: format!("node '{}' output '{out}' missing from tensors table", n.id),
                });
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            for (j, inp) in n.inputs.iter().enumerate() {
                if !available.contains(inp.as_str()) && !producers.contains_key(inp.as_str()) {
                    return Err(GraphError::Schema {
                        pointer: format!("/nodes/{i}/inputs/{j}"),
                        message: format!(
                            "node '{}' reads '{inp}' which is neither a graph input, a weight, nor a node output",
                            n.id
                        ),
                    });
                }
            }
        }
        for (j, out) in self.outputs.iter().enumerate() {
            if !producers.contains_key(out.as_str()) && !available.contains(out.as_str()) {
                return Err(GraphError::Schema {
                    pointer: format!("/outputs/{j}"),
                    message: format!("graph output '{out}' is never produced"),
                });
            }
        }
        self.canonical_topo_order()
    }

    /// Kahn's algorithm with a lexicographic min-heap on node id, so the
    /// order does not depend on file order.
    pub fn canonical_topo_order(&self) -> Result<Vec<usize>, GraphError> {
        let n = self.nodes.len();
        let producer: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, nd)| (nd.output(), i))
            .collect();
        let mut indegree = vec![0usize; n];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, nd) in self.nodes.iter().enumerate() {
            for inp in &nd.inputs {
                if let Some(&p) = producer.get(inp.as_str()) {
                    indegree[i] += 1;
                    consumers[p].push(i);
                }
            }
        }
        let mut heap: BinaryHeap<std::cmp::Reverse<(&str, usize)>> = BinaryHeap::new();
        for (i, deg) in indegree.iter().enumerate() {
            if *deg == 0 {
                heap.push(std::cmp::Reverse((self.nodes[i].id.as_str(), i)));
            }
        }
        let mut order = Vec::with_capacity(n);
        while let Some(std::cmp::Reverse((_, i))) = heap.pop() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    heap.push(std::cmp::Reverse((self.nodes[c].id.as_str(), c)));
                }
            }
        }
        if order.len() != n {
            return Err(GraphError::NotADag(n - order.len()));
        }
        Ok(order)
    }

    /// Reorder nodes into the canonical topological order.
    pub fn canonicalize(&mut self) -> Result<(), GraphError> {
        let order = self.canonical_topo_order()?;
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for i in order {
            nodes.push(self.nodes[i].clone());
        }
        self.nodes = nodes;
        Ok(())
    }

    pub fn node_by_id(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Index of the node producing `tensor`, if any.
    pub fn producer_of(&self, tensor: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.output() == tensor)
    }

    pub fn is_weight(&self, name: &str) -> bool {
        self.weights.contains_key(name)
    }

    pub fn is_input(&self, name: &str) -> bool {
        self.inputs.iter().any(|i| i.name == name)
    }

    /// SHA-256 of the canonical JSON form; stable content address.
    pub fn content_hash(&self) -> Result<[u8; 32], GraphError> {
        let text = super::io::to_canonical_json(self)?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        Ok(h.finalize().into())
    }

    /// SHA-256 over the weight table alone (names, shapes, values).
    pub fn weights_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, p) in &self.weights {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}
