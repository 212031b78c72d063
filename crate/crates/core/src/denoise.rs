//! Denoiser interface and backends.
//!
//! A denoiser predicts the clean sample `x0_hat` from a noisy trajectory,
//! a cached context embedding, and a continuous time. Two backends are
//! provided: an analytic Gaussian model whose prediction is the exact
//! conditional mean (closed-form oracles stay available for solver tests),
//! and an interpreter over an extracted core graph. The context encoder is
//! wrapped in a content-addressed cache so one planning cycle computes the
//! embedding once however many times the loop asks for it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{interpret, ExtractedModules, Graph};
use crate::schedule::VpSchedule;
use crate::tensor::{Tensor, TensorError};

/// Embedding rows used by the emulated model.
pub const DEFAULT_EMBED_ROWS: usize = 226;
/// Embedding width used by the emulated model.
pub const DEFAULT_EMBED_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("variance must be positive everywhere")]
    NonPositiveVariance,
    #[error("denoiser backend failed at t={t}: {message}")]
    Backend { t: f64, message: String },
    #[error("encoder backend failed: {message}")]
    EncoderBackend { message: String },
    #[error("head weights: {0}")]
    WeightShape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Trajectory tensor dimensions: agents x timesteps x channels, channel
/// order (x, y, cos theta, sin theta).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryShape {
    pub agents: usize,
    pub timesteps: usize,
    pub channels: usize,
}

impl Default for TrajectoryShape {
    fn default() -> Self {
        Self {
            agents: 33,
            timesteps: 81,
            channels: 4,
        }
    }
}

impl TrajectoryShape {
    pub fn new(agents: usize, timesteps: usize, channels: usize) -> Self {
        Self {
            agents,
            timesteps,
            channels,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.agents, self.timesteps, self.channels]
    }

    pub fn len(&self) -> usize {
        self.agents * self.timesteps * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(&self) -> Tensor {
        Tensor::zeros(self.dims())
    }
}

/// Scene context: the encoder input. Fields are opaque tensors with shapes
/// fixed at construction; the canonical byte serialization keys the
/// encoder cache.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneContext {
    pub ego_history: Tensor,
    pub neighbor_tracks: Tensor,
    pub lane_geometry: Tensor,
    pub route: Tensor,
    pub traffic_signals: Tensor,
    pub goal_pose: Tensor,
}

impl SceneContext {
    fn fields(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("ego_history", &self.ego_history),
            ("neighbor_tracks", &self.neighbor_tracks),
            ("lane_geometry", &self.lane_geometry),
            ("route", &self.route),
            ("traffic_signals", &self.traffic_signals),
            ("goal_pose", &self.goal_pose),
        ]
    }

    /// SHA-256 over the canonical field serialization; identical bytes
    /// yield identical keys regardless of object identity.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.fields() {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(t.canonical_bytes());
        }
        h.finalize().into()
    }

    /// All field values flattened in canonical field order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.fields() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn total_len(&self) -> usize {
        self.fields().iter().map(|(_, t)| t.len()).sum()
    }

    /// Deterministic context with the given flat field widths, filled with
    /// seeded standard normals.
    pub fn seeded(seed: u64, widths: [usize; 6]) -> Self {
        let total: usize = widths.iter().sum();
        let values = seeded_standard_normals(seed, total);
        let mut off = 0;
        let mut take = |w: usize| {
            let t = Tensor::new(vec![w], values[off..off + w].to_vec()).unwrap();
            off += w;
            t
        };
        Self {
            ego_history: take(widths[0]),
            neighbor_tracks: take(widths[1]),
            lane_geometry: take(widths[2]),
            route: take(widths[3]),
            traffic_signals: take(widths[4]),
            goal_pose: take(widths[5]),
        }
    }
}

/// Context embedding: a finite L x d tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding(Tensor);

impl ContextEmbedding {
    pub fn new(t: Tensor) -> Result<Self, DenoiseError> {
        if t.rank() != 2 {
            return Err(DenoiseError::ShapeMismatch {
                expected: vec![0, 0],
                actual: t.shape().to_vec(),
            });
        }
        if t.has_non_finite() {
            return Err(DenoiseError::NonFinite);
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Mean over rows: the pooled d-vector the head consumes.
    pub fn pooled(&self) -> Tensor {
        let (rows, cols) = (self.0.shape()[0], self.0.shape()[1]);
        let mut out = vec![0.0; cols];
        for row in self.0.data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for v in out.iter_mut() {
            *v /= rows.max(1) as f64;
        }
        Tensor::new(vec![cols], out).unwrap()
    }
}

/// Context encoder: deterministic map from scene context to embedding.
pub trait EncoderModel: Send + Sync {
    fn encode(&self, ctx: &SceneContext) -> Result<ContextEmbedding, DenoiseError>;
}

/// Data-prediction denoiser: `(x_t, c, t) -> x0_hat`, shape-preserving.
pub trait DenoiserModel: Send + Sync {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        c: &ContextEmbedding,
        t: f64,
    ) -> Result<Tensor, DenoiseError>;
}

/// Content-addressed cache around an encoder.
///
/// Lookups key on the context content hash. A miss computes under the
/// cache lock, so concurrent first fills run the underlying encoder at
/// most once per key. The invocation counter is monotone and survives
/// `clear`. In pass-through mode every call hits the underlying encoder,
/// which emulates the monolithic deployment's fused re-encoding.
pub struct EncoderCache {
    encoder: Arc<dyn EncoderModel>,
    entries: Mutex<Vec<([u8; 32], ContextEmbedding)>>,
    capacity: usize,
    caching: bool,
    calls: AtomicU64,
}

impl EncoderCache {
    /// Caching cache; capacity 1 holds the current planning cycle only.
    pub fn new(encoder: Arc<dyn EncoderModel>, capacity: usize) -> Self {
        Self {
            encoder,
            entries: Mutex::new(Vec::new()),
            capacity: capacity.max(1),
            caching: true,
            calls: AtomicU64::new(0),
        }
    }

    /// Pass-through wrapper: no storage, every call re-encodes.
    pub fn passthrough(encoder: Arc<dyn EncoderModel>) -> Self {
        Self {
            encoder,
            entries: Mutex::new(Vec::new()),
            capacity: 0,
            caching: false,
            calls: AtomicU64::new(0),
        }
    }

    pub fn caching_enabled(&self) -> bool {
        self.caching
    }

    /// Underlying-encoder invocations so far.
    pub fn encoder_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn clear(&self) {
        self.entries.lock().unwrap().clear();
    }

    /// Returns the embedding and whether it was served from the cache.
    pub fn cached_encode(
        &self,
        ctx: &SceneContext,
    ) -> Result<(ContextEmbedding, bool), DenoiseError> {
        if !self.caching {
            self.calls.fetch_add(1, Ordering::SeqCst);
            return Ok((self.encoder.encode(ctx)?, false));
        }
        let key = ctx.content_hash();
        let mut entries = self.entries.lock().unwrap();
        if let Some(pos) = entries.iter().position(|(k, _)| *k == key) {
            let entry = entries.remove(pos);
            let emb = entry.1.clone();
            entries.insert(0, entry);
            return Ok((emb, true));
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let emb = self.encoder.encode(ctx)?;
        entries.insert(0, (key, emb.clone()));
        entries.truncate(self.capacity);
        Ok((emb, false))
    }
}

/// Standard normals from a seeded ChaCha8 stream via Box-Muller on 53-bit
/// uniforms; fully specified so fixtures reproduce across languages.
pub fn seeded_standard_normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = || ((rng.next_u64() >> 11) as f64 + 1.0) * (1.0 / 9007199254740993.0);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = uniform();
        let u2: f64 = uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        if out.len() < n {
            out.push(r * theta.sin());
        }
    }
    out
}

/// Reproducible Gaussian-denoiser parameters: the mean is drawn from the
/// seed, the variance is constant per element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFixture {
    pub seed: u64,
    pub shape: Vec<usize>,
    pub variance: f64,
}

impl GaussianFixture {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("fixture serializes");
        std::fs::write(path, text)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// Analytic denoiser for Gaussian data `x0 ~ N(mean, diag(variance))`.
///
/// With `x_t = alpha x0 + sigma eps`, the exact conditional mean is
/// `E[x0 | x_t] = mean + alpha v (x_t - alpha mean) / (alpha^2 v + sigma^2)`
/// per element, which is what `predict_x0` returns. The context embedding
/// is ignored; the scene is fully described by the mean.
#[derive(Debug, Clone)]
pub struct GaussianDenoiser {
    mean: Tensor,
    variance: Tensor,
    schedule: VpSchedule,
}

impl GaussianDenoiser {
    pub fn new(mean: Tensor, variance: Tensor, schedule: VpSchedule) -> Result<Self, DenoiseError> {
        if mean.shape() != variance.shape() {
            return Err(DenoiseError::ShapeMismatch {
                expected: mean.shape().to_vec(),
                actual: variance.shape().to_vec(),
            });
        }
        // negated so NaN variances are rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if variance.data().iter().any(|&v| !(v > 0.0)) {
            return Err(DenoiseError::NonPositiveVariance);
        }
        Ok(Self {
            mean,
            variance,
            schedule,
        })
    }

    pub fn from_fixture(f: &GaussianFixture, schedule: VpSchedule) -> Result<Self, DenoiseError> {
        let n: usize = f.shape.iter().product();
        let mean = Tensor::new(f.shape.clone(), seeded_standard_normals(f.seed, n))?;
        let variance = Tensor::filled(f.shape.clone(), f.variance);
        Self::new(mean, variance, schedule)
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn variance(&self) -> &Tensor {
        &self.variance
    }

    pub fn schedule(&self) -> &VpSchedule {
        &self.schedule
    }

    /// SHA-256 over the parameters, for weight-identity assertions.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.mean.canonical_bytes());
        h.update(self.variance.canonical_bytes());
        h.finalize().into()
    }
}

impl DenoiserModel for GaussianDenoiser {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        _c: &ContextEmbedding,
        t: f64,
    ) -> Result<Tensor, DenoiseError> {
        if x_t.shape() != self.mean.shape() {
            return Err(DenoiseError::ShapeMismatch {
                expected: self.mean.shape().to_vec(),
                actual: x_t.shape().to_vec(),
            });
        }
        let (alpha, sigma, _) =
            self.schedule
                .alpha_sigma_lambda(t)
                .map_err(|e| DenoiseError::Backend {
                    t,
                    message: e.to_string(),
                })?;
        let s2 = sigma * sigma;
        let data: Vec<f64> = x_t
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(self.variance.data())
            .map(|((&x, &mu), &v)| mu + alpha * v * (x - alpha * mu) / (alpha * alpha * v + s2))
            .collect();
        Ok(Tensor::new(x_t.shape().to_vec(), data)?)
    }
}

/// Encoder backed by an extracted graph with a single input and output.
/// The scene context is flattened in canonical field order and reshaped to
/// the graph's declared input.
pub struct GraphEncoder {
    graph: Graph,
    input_name: String,
    input_shape: Vec<usize>,
    output_name: String,
}

impl GraphEncoder {
    pub fn new(graph: Graph) -> Result<Self, DenoiseError> {
        if graph.inputs.len() != 1 || graph.outputs.len() != 1 {
            return Err(DenoiseError::EncoderBackend {
                message: format!(
                    "encoder graph needs 1 input and 1 output, has {} and {}",
                    graph.inputs.len(),
                    graph.outputs.len()
                ),
            });
        }
        let input_name = graph.inputs[0].name.clone();
        let input_shape = graph.inputs[0].shape.clone();
        let output_name = graph.outputs[0].clone();
        Ok(Self {
            graph,
            input_name,
            input_shape,
            output_name,
        })
    }
}

impl EncoderModel for GraphEncoder {
    fn encode(&self, ctx: &SceneContext) -> Result<ContextEmbedding, DenoiseError> {
        let flat = ctx.flatten();
        let expected: usize = self.input_shape.iter().product();
        if flat.len() != expected {
            return Err(DenoiseError::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: vec![flat.len()],
            });
        }
        let feed = Tensor::new(self.input_shape.clone(), flat)?;
        let feeds = std::collections::BTreeMap::from([(self.input_name.clone(), feed)]);
        let out = interpret(&self.graph, &feeds).map_err(|e| DenoiseError::EncoderBackend {
            message: e.to_string(),
        })?;
        ContextEmbedding::new(out[&self.output_name].clone())
    }
}

/// Denoiser backed by an extracted core graph. The trajectory is flattened
/// to the graph's state input and the output reshaped back.
pub struct GraphCoreDenoiser {
    graph: Graph,
    state_input: String,
    state_shape: Vec<usize>,
    context_input: String,
    context_shape: Vec<usize>,
    time_input: String,
    output: String,
}

impl GraphCoreDenoiser {
    pub fn from_extracted(m: &ExtractedModules) -> Result<Self, DenoiseError> {
        let find = |name: &str| -> Result<Vec<usize>, DenoiseError> {
            m.core
                .inputs
                .iter()
                .find(|i| i.name == name)
                .map(|i| i.shape.clone())
                .ok_or_else(|| DenoiseError::Backend {
                    t: f64::NAN,
                    message: format!("core graph is missing input '{name}'"),
                })
        };
        Ok(Self {
            state_shape: find(&m.io.core_state_input)?,
            context_shape: find(&m.io.core_context_input)?,
            graph: m.core.clone(),
            state_input: m.io.core_state_input.clone(),
            context_input: m.io.core_context_input.clone(),
            time_input: m.io.core_time_input.clone(),
            output: m.io.core_output.clone(),
        })
    }

    pub fn weights_hash(&self) -> [u8; 32] {
        self.graph.weights_hash()
    }
}

impl DenoiserModel for GraphCoreDenoiser {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        c: &ContextEmbedding,
        t: f64,
    ) -> Result<Tensor, DenoiseError> {
        let state_len: usize = self.state_shape.iter().product();
        if x_t.len() != state_len {
            return Err(DenoiseError::ShapeMismatch {
                expected: self.state_shape.clone(),
                actual: x_t.shape().to_vec(),
            });
        }
        let ctx_len: usize = self.context_shape.iter().product();
        if c.tensor().len() != ctx_len {
            return Err(DenoiseError::ShapeMismatch {
                expected: self.context_shape.clone(),
                actual: c.tensor().shape().to_vec(),
            });
        }
        let feeds = std::collections::BTreeMap::from([
            (
                self.state_input.clone(),
                x_t.reshape(self.state_shape.clone())?,
            ),
            (
                self.context_input.clone(),
                c.tensor().reshape(self.context_shape.clone())?,
            ),
            (self.time_input.clone(), Tensor::new(vec![1, 1], vec![t])?),
        ]);
        let out = interpret(&self.graph, &feeds).map_err(|e| DenoiseError::Backend {
            t,
            message: e.to_string(),
        })?;
        Ok(out[&self.output].reshape(x_t.shape().to_vec())?)
    }
}

/// Adapter for backends that emit one fewer timestep than they consume
/// (future steps only): the missing current-timestep slice is restored
/// from the input, whose slot 0 holds the anchored current state.
pub struct PadTimeToFull<D> {
    pub inner: D,
}

impl<D: DenoiserModel> DenoiserModel for PadTimeToFull<D> {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        c: &ContextEmbedding,
        t: f64,
    ) -> Result<Tensor, DenoiseError> {
        let out = self.inner.predict_x0(x_t, c, t)?;
        if out.shape() == x_t.shape() {
            return Ok(out);
        }
        if out.rank() == 3
            && x_t.rank() == 3
            && out.shape()[0] == x_t.shape()[0]
            && out.shape()[2] == x_t.shape()[2]
            && out.shape()[1] + 1 == x_t.shape()[1]
        {
            let current = x_t.slice(1, 0, 1)?;
            return Ok(Tensor::concat(&[&current, &out], 1)?);
        }
        Err(DenoiseError::ShapeMismatch {
            expected: x_t.shape().to_vec(),
            actual: out.shape().to_vec(),
        })
    }
}

/// Linear turn-indicator head: argmax of an affine map over sampled ego
/// waypoints and, optionally, the pooled context embedding. Ties break to
/// the lowest class index.
#[derive(Debug, Clone)]
pub struct LinearHead {
    weight: Tensor,
    bias: Tensor,
    /// Ego waypoint time indices to sample; None takes all of them.
    waypoint_times: Option<Vec<usize>>,
    use_context: bool,
}

pub const TURN_CLASSES: usize = 4;

impl LinearHead {
    pub fn new(
        weight: Tensor,
        bias: Tensor,
        waypoint_times: Option<Vec<usize>>,
        use_context: bool,
    ) -> Result<Self, DenoiseError> {
        if weight.rank() != 2 || weight.shape()[0] != TURN_CLASSES {
            return Err(DenoiseError::WeightShape(format!(
                "weight must be [{TURN_CLASSES}, features], got {:?}",
                weight.shape()
            )));
        }
        if bias.len() != TURN_CLASSES {
            return Err(DenoiseError::WeightShape(format!(
                "bias must have {TURN_CLASSES} entries, got {}",
                bias.len()
            )));
        }
        Ok(Self {
            weight,
            bias,
            waypoint_times,
            use_context,
        })
    }

    /// Zero head: always predicts class 0.
    pub fn zeros(features: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![TURN_CLASSES, features]),
            bias: Tensor::zeros(vec![TURN_CLASSES]),
            waypoint_times: None,
            use_context: true,
        }
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.weight.canonical_bytes());
        h.update(self.bias.canonical_bytes());
        h.finalize().into()
    }

    fn features(&self, x0_hat: &Tensor, c: &ContextEmbedding) -> Result<Vec<f64>, DenoiseError> {
        if x0_hat.rank() != 3 {
            return Err(DenoiseError::ShapeMismatch {
                expected: vec![0, 0, 0],
                actual: x0_hat.shape().to_vec(),
            });
        }
        let (times, channels) = (x0_hat.shape()[1], x0_hat.shape()[2]);
        let selected: Vec<usize> = match &self.waypoint_times {
            Some(list) => list.clone(),
            None => (0..times).collect(),
        };
        let mut f = Vec::new();
        for &ti in &selected {
            if ti >= times {
                return Err(DenoiseError::WeightShape(format!(
                    "waypoint time index {ti} out of range ({times} timesteps)"
                )));
            }
            for ch in 0..channels {
                f.push(x0_hat.at(&[0, ti, ch]));
            }
        }
        if self.use_context {
            f.extend_from_slice(c.pooled().data());
        }
        Ok(f)
    }

    /// Class index in {0, 1, 2, 3}.
    pub fn turn_indicator(
        &self,
        x0_hat: &Tensor,
        c: &ContextEmbedding,
    ) -> Result<usize, DenoiseError> {
        let f = self.features(x0_hat, c)?;
        if f.len() != self.weight.shape()[1] {
            return Err(DenoiseError::WeightShape(format!(
                "head expects {} features, got {}",
                self.weight.shape()[1],
                f.len()
            )));
        }
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for class in 0..TURN_CLASSES {
            let row = &self.weight.data()[class * f.len()..(class + 1) * f.len()];
            let score: f64 =
                row.iter().zip(&f).map(|(w, v)| w * v).sum::<f64>() + self.bias.data()[class];
            if score > best_score {
                best_score = score;
                best = class;
            }
        }
        Ok(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ctx(seed: u64) -> SceneContext {
        SceneContext::seeded(seed, [4, 2, 2, 2, 1, 1])
    }

    fn unit_embedding() -> ContextEmbedding {
        ContextEmbedding::new(Tensor::zeros(vec![2, 3])).unwrap()
    }

    struct CountingEncoder {
        calls: AtomicU64,
    }

    impl EncoderModel for CountingEncoder {
        fn encode(&self, ctx: &SceneContext) -> Result<ContextEmbedding, DenoiseError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            // deterministic function of the context bytes
            let s: f64 = ctx.flatten().iter().sum();
            ContextEmbedding::new(Tensor::filled(vec![2, 3], s))
        }
    }

    #[test]
    fn cache_computes_once_per_context() {
        let enc = Arc::new(CountingEncoder {
            calls: AtomicU64::new(0),
        });
        let cache = EncoderCache::new(enc, 1);
        let c = ctx(1);
        let (first, hit0) = cache.cached_encode(&c).unwrap();
        assert!(!hit0);
        for _ in 0..10 {
            let (e, hit) = cache.cached_encode(&c).unwrap();
            assert!(hit);
            assert_eq!(e, first);
        }
        assert_eq!(cache.encoder_calls(), 1);
    }

    #[test]
    fn passthrough_reencodes_every_call() {
        let enc = Arc::new(CountingEncoder {
            calls: AtomicU64::new(0),
        });
        let cache = EncoderCache::passthrough(enc);
        let c = ctx(1);
        for _ in 0..11 {
            let (_, hit) = cache.cached_encode(&c).unwrap();
            assert!(!hit);
        }
        assert_eq!(cache.encoder_calls(), 11);
    }

    #[test]
    fn distinct_contexts_are_cached_separately() {
        let enc = Arc::new(CountingEncoder {
            calls: AtomicU64::new(0),
        });
        let cache = EncoderCache::new(enc, 2);
        let a = ctx(1);
        let b = ctx(2);
        cache.cached_encode(&a).unwrap();
        cache.cached_encode(&b).unwrap();
        assert_eq!(cache.encoder_calls(), 2);
        assert!(cache.cached_encode(&a).unwrap().1);
        assert!(cache.cached_encode(&b).unwrap().1);
        assert_eq!(cache.encoder_calls(), 2);
    }

    #[test]
    fn concurrent_first_fill_computes_once() {
        struct SlowEncoder {
            calls: AtomicU64,
        }
        impl EncoderModel for SlowEncoder {
            fn encode(&self, _ctx: &SceneContext) -> Result<ContextEmbedding, DenoiseError> {
                self.calls.fetch_add(1, Ordering::SeqCst);
                std::thread::sleep(std::time::Duration::from_millis(20));
                ContextEmbedding::new(Tensor::filled(vec![1, 2], 1.0))
            }
        }
        let cache = Arc::new(EncoderCache::new(
            Arc::new(SlowEncoder {
                calls: AtomicU64::new(0),
            }),
            1,
        ));
        let c = ctx(1);
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let cache = cache.clone();
                let c = c.clone();
                scope.spawn(move || {
                    cache.cached_encode(&c).unwrap();
                });
            }
        });
        assert_eq!(cache.encoder_calls(), 1);
    }

    #[test]
    fn cached_value_is_bitwise_equal_to_direct_encode() {
        let enc = Arc::new(CountingEncoder {
            calls: AtomicU64::new(0),
        });
        let direct = enc.encode(&ctx(5)).unwrap();
        let cache = EncoderCache::new(enc, 1);
        let (cached, _) = cache.cached_encode(&ctx(5)).unwrap();
        let (again, _) = cache.cached_encode(&ctx(5)).unwrap();
        assert_eq!(direct, cached);
        assert_eq!(direct, again);
    }

    #[test]
    fn gaussian_degenerate_prior_returns_mean() {
        let sched = VpSchedule::default();
        let mean = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let variance = Tensor::filled(vec![3], 1e-14);
        let den = GaussianDenoiser::new(mean.clone(), variance, sched).unwrap();
        let x = Tensor::new(vec![3], vec![5.0, 5.0, 5.0]).unwrap();
        let out = den.predict_x0(&x, &unit_embedding(), 0.5).unwrap();
        assert!(out.max_abs_diff(&mean).unwrap() < 1e-9);
    }

    #[test]
    fn gaussian_zero_innovation_returns_mean() {
        let sched = VpSchedule::default();
        let mean = Tensor::new(vec![2], vec![0.7, -0.3]).unwrap();
        let variance = Tensor::filled(vec![2], 0.25);
        let den = GaussianDenoiser::new(mean.clone(), variance, sched).unwrap();
        let alpha = sched.alpha(0.4).unwrap();
        let x = mean.scale(alpha);
        let out = den.predict_x0(&x, &unit_embedding(), 0.4).unwrap();
        assert!(out.max_abs_diff(&mean).unwrap() < 1e-14);
    }

    #[test]
    fn gaussian_rejects_bad_time() {
        let sched = VpSchedule::default();
        let den =
            GaussianDenoiser::new(Tensor::zeros(vec![1]), Tensor::filled(vec![1], 0.25), sched)
                .unwrap();
        let x = Tensor::zeros(vec![1]);
        assert!(den.predict_x0(&x, &unit_embedding(), 0.0).is_err());
        assert!(den.predict_x0(&x, &unit_embedding(), 1.5).is_err());
    }

    /// Monte-Carlo oracle: self-normalized importance sampling of
    /// E[x0 | x_t] from the prior, independent of the closed form.
    #[test]
    fn gaussian_prediction_is_conditional_mean() {
        let sched = VpSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for draw in 0..20 {
            let mu = rng.gen_range(-2.0..2.0);
            let v: f64 = rng.gen_range(0.05..1.0);
            let t = rng.gen_range(0.2..1.0);
            let (alpha, sigma, _) = sched.alpha_sigma_lambda(t).unwrap();
            let noise = seeded_standard_normals(9000 + draw, 2);
            let x_t = alpha * (mu + v.sqrt() * noise[0]) + sigma * noise[1];

            let den = GaussianDenoiser::new(Tensor::scalar(mu), Tensor::scalar(v), sched).unwrap();
            let predicted = den
                .predict_x0(&Tensor::scalar(x_t), &unit_embedding(), t)
                .unwrap()
                .data()[0];

            let n = 100_000;
            let samples = seeded_standard_normals(7000 + draw, n);
            let mut logw = Vec::with_capacity(n);
            let mut x0s = Vec::with_capacity(n);
            for z in samples {
                let x0 = mu + v.sqrt() * z;
                let resid = (x_t - alpha * x0) / sigma;
                logw.push(-0.5 * resid * resid);
                x0s.push(x0);
            }
            let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
            let wsum: f64 = w.iter().sum();
            let est: f64 = w.iter().zip(&x0s).map(|(w, x)| w * x).sum::<f64>() / wsum;
            let se = (w
                .iter()
                .zip(&x0s)
                .map(|(w, x)| w * w * (x - est) * (x - est))
                .sum::<f64>())
            .sqrt()
                / wsum;
            assert!(
                (predicted - est).abs() <= 3.0 * se,
                "draw {draw}: predicted {predicted}, mc {est} +- {se}"
            );
        }
    }

    #[test]
    fn pad_adapter_restores_current_slice() {
        struct Truncating;
        impl DenoiserModel for Truncating {
            fn predict_x0(
                &self,
                x_t: &Tensor,
                _c: &ContextEmbedding,
                _t: f64,
            ) -> Result<Tensor, DenoiseError> {
                // emits future steps only
                Ok(x_t.slice(1, 1, x_t.shape()[1])?.scale(2.0))
            }
        }
        let den = PadTimeToFull { inner: Truncating };
        let x = Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64).collect()).unwrap();
        let out = den.predict_x0(&x, &unit_embedding(), 0.5).unwrap();
        assert_eq!(out.shape(), x.shape());
        // slot 0 carries the input's current state
        assert_eq!(out.at(&[0, 0, 0]), x.at(&[0, 0, 0]));
        assert_eq!(out.at(&[1, 0, 1]), x.at(&[1, 0, 1]));
        // the rest is the backend output
        assert_eq!(out.at(&[0, 1, 0]), 2.0 * x.at(&[0, 1, 0]));
    }

    #[test]
    fn zero_head_ties_break_to_class_zero() {
        let head = LinearHead::zeros(3 * 4 + 3);
        let x0 = Tensor::zeros(vec![2, 3, 4]);
        let c = ContextEmbedding::new(Tensor::zeros(vec![2, 3])).unwrap();
        assert_eq!(head.turn_indicator(&x0, &c).unwrap(), 0);
    }

    #[test]
    fn one_hot_bias_selects_class() {
        let features = 2 * 4 + 3;
        let mut bias = Tensor::zeros(vec![TURN_CLASSES]);
        bias.data_mut()[2] = 1.0;
        let head = LinearHead::new(
            Tensor::zeros(vec![TURN_CLASSES, features]),
            bias,
            None,
            true,
        )
        .unwrap();
        let x0 = Tensor::zeros(vec![1, 2, 4]);
        let c = ContextEmbedding::new(Tensor::zeros(vec![2, 3])).unwrap();
        assert_eq!(head.turn_indicator(&x0, &c).unwrap(), 2);
    }

    #[test]
    fn head_feature_width_is_checked() {
        let head = LinearHead::zeros(5);
        let x0 = Tensor::zeros(vec![1, 2, 4]);
        let c = ContextEmbedding::new(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(
            head.turn_indicator(&x0, &c),
            Err(DenoiseError::WeightShape(_))
        ));
    }

    #[test]
    fn gaussian_fixture_file_round_trip() {
        let fixture = GaussianFixture {
            seed: 99,
            shape: vec![2, 3, 4],
            variance: 0.25,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gaussian.json");
        fixture.save(&path).unwrap();
        let back = GaussianFixture::load(&path).unwrap();
        assert_eq!(fixture, back);
        // both fixtures rebuild the identical denoiser
        let sched = VpSchedule::default();
        let a = GaussianDenoiser::from_fixture(&fixture, sched).unwrap();
        let b = GaussianDenoiser::from_fixture(&back, sched).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn seeded_normals_are_reproducible() {
        let a = seeded_standard_normals(42, 8);
        let b = seeded_standard_normals(42, 8);
        assert_eq!(a, b);
        let c = seeded_standard_normals(43, 8);
        assert_ne!(a, c);
        // crude sanity: zero mean, unit-ish variance over a larger draw
        let big = seeded_standard_normals(7, 40_000);
        let mean: f64 = big.iter().sum::<f64>() / big.len() as f64;
        let var: f64 = big.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / big.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
