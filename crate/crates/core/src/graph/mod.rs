//! Computational-graph IR and decomposition toolkit.
//!
//! A small ONNX-like JSON format carries DAGs of typed tensor ops with
//! shared weight references. The toolkit finds the repeated weight-sharing
//! substructure of an unrolled diffusion export, extracts encoder / core /
//! head modules with boundary rewiring and cleanup, interprets graphs with
//! reference semantics, and validates numerical equivalence between the
//! monolithic graph and the module composition.

mod detect;
mod extract;
mod fixture;
mod interp;
mod io;
mod model;
mod validate;

pub use detect::{detect_repeats, CopyRegion, RepeatDetection};
pub use extract::{
    extract_modules, identify_encoder, DecompositionReport, ExtractedModules, ModuleIo, PortClass,
};
pub use fixture::{generate_unrolled_fixture, FixtureSpec};
pub use interp::{interpret, interpret_all};
pub use io::{load_graph, save_graph};
pub use model::{DType, Graph, InputDecl, Node, OpSpec, Payload, TensorMeta};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("schema violation at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("graph is not a DAG: no topological order exists (stuck at {0} nodes)")]
    NotADag(usize),
    #[error("missing feed for graph input '{0}'")]
    MissingFeed(String),
    #[error("unexpected feed '{0}' (not a graph input)")]
    UnknownFeed(String),
    #[error("shape mismatch at {site}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        site: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("node '{node}': {message}")]
    NodeEval { node: String, message: String },
    #[error("no repeated weight-sharing regions found; nothing to extract")]
    NoRepeats,
    #[error("repeat detection inconsistent: {0}")]
    DetectionInconsistent(String),
    #[error("encoder identification failed: {0}")]
    EncoderIdentification(String),
    #[error("timestep promotion failed: {0}")]
    TimestepPromotion(String),
    #[error("extraction incomplete: {0}")]
    ExtractionIncomplete(String),
    #[error("equivalence validation: {0}")]
    Validation(String),
    #[error("fixture spec invalid: {0}")]
    FixtureSpec(String),
    #[error(transparent)]
    Schedule(#[from] crate::schedule::ScheduleError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub use validate::{validate_equivalence, EquivalenceReport, ValidateConfig};
