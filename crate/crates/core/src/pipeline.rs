//! End-to-end planning cycle.
//!
//! One `plan()` call runs the full procedure: the context embedding is
//! obtained through the encoder cache, a logSNR-uniform grid is built, the
//! trajectory starts from `temperature * noise` (zeros at temperature 0),
//! N solver updates run with the observed state re-anchored after each
//! one, a final denoise-to-zero evaluation produces the output prediction,
//! the turn-indicator head classifies it, and the trajectory is
//! denormalized to physical units. Cycle stats count encoder and core
//! invocations and per-stage wall time.
//!
//! In monolithic-emulation mode the encoder cache is a pass-through, so
//! every core call re-encodes the context; this reproduces the fused
//! export's call pattern and makes the caching benefit measurable within
//! one codebase.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoise::{
    ContextEmbedding, DenoiseError, DenoiserModel, EncoderCache, EncoderModel, LinearHead,
    SceneContext, TrajectoryShape,
};
use crate::schedule::{ScheduleError, TimestepGrid, VpSchedule};
use crate::solver::{
    run_solver, DenoisingTrace, ProbeSpec, SolverError, SolverKind, StepHooks, StepRecord,
};
use crate::tensor::Tensor;

const NON_FINITE_MARKER: &str = "non-finite trajectory tensor";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid parameter {key}: {message}")]
    Param { key: String, message: String },
    #[error("non-finite trajectory at step {step}")]
    NonFinite { step: usize },
    #[error("stage {stage}: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error("anchor index (agent {agent}, time {time}) out of bounds for {shape:?}")]
    AnchorOutOfBounds {
        agent: usize,
        time: usize,
        shape: Vec<usize>,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Which update family drives the loop; combined with the order it selects
/// the [`SolverKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverFamily {
    DpmPlusPlus,
    Ddim,
}

/// Agent/time slots to overwrite with observed states after every solver
/// update, in normalized units.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub entries: Vec<AnchorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorEntry {
    pub agent: usize,
    pub time: usize,
    pub state: Vec<f64>,
}

impl AnchorSpec {
    /// Ego-only anchoring of the current timestep slot.
    pub fn ego_current(state: Vec<f64>) -> Self {
        Self {
            entries: vec![AnchorEntry {
                agent: 0,
                time: 0,
                state,
            }],
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, shape: &TrajectoryShape) -> Result<(), PipelineError> {
        for e in &self.entries {
            if e.agent >= shape.agents
                || e.time >= shape.timesteps
                || e.state.len() != shape.channels
            {
                return Err(PipelineError::AnchorOutOfBounds {
                    agent: e.agent,
                    time: e.time,
                    shape: shape.dims(),
                });
            }
        }
        Ok(())
    }

    pub fn apply(&self, x: &mut Tensor) {
        for e in &self.entries {
            for (ch, &v) in e.state.iter().enumerate() {
                x.set(&[e.agent, e.time, ch], v);
            }
        }
    }

    /// True when the anchored slots of `x` hold exactly the anchor states.
    pub fn holds_in(&self, x: &Tensor) -> bool {
        self.entries.iter().all(|e| {
            e.state
                .iter()
                .enumerate()
                .all(|(ch, &v)| x.at(&[e.agent, e.time, ch]).to_bits() == v.to_bits())
        })
    }
}

/// Runtime-reconfigurable planner parameters. The JSON form mirrors the
/// struct field for field, with defaults for anything omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub n_steps: usize,
    pub order: u8,
    pub solver: SolverFamily,
    pub beta0: f64,
    pub beta1: f64,
    pub temperature: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Physical scale of the position channels, meters.
    pub sigma_norm_m: f64,
    /// Per-channel offset added during denormalization.
    pub mu_norm: Vec<f64>,
    pub anchor: AnchorSpec,
    pub monolithic_emulation: bool,
    /// Noise seed for temperature > 0 initialization (experimental; the
    /// deployed configuration uses temperature 0).
    pub noise_seed: u64,
}

pub const MAX_STEPS: usize = 50;

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            n_steps: 10,
            order: 2,
            solver: SolverFamily::DpmPlusPlus,
            beta0: crate::schedule::DEFAULT_BETA0,
            beta1: crate::schedule::DEFAULT_BETA1,
            temperature: 0.0,
            t_start: crate::schedule::DEFAULT_T_START,
            t_end: crate::schedule::DEFAULT_T_END,
            sigma_norm_m: 20.0,
            mu_norm: vec![0.0; 4],
            anchor: AnchorSpec::none(),
            monolithic_emulation: false,
            noise_seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn effective_kind(&self) -> SolverKind {
        match (self.solver, self.order) {
            (SolverFamily::Ddim, _) => SolverKind::Ddim,
            (SolverFamily::DpmPlusPlus, 1) => SolverKind::DpmPlusPlus1,
            (SolverFamily::DpmPlusPlus, _) => SolverKind::DpmPlusPlus2,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let check = |ok: bool, key: &str, msg: String| -> Result<(), PipelineError> {
            if ok {
                Ok(())
            } else {
                Err(PipelineError::Param {
                    key: key.into(),
                    message: msg,
                })
            }
        };
        check(
            (1..=MAX_STEPS).contains(&self.n_steps),
            "n_steps",
            format!("{} outside the valid range [1, {MAX_STEPS}]", self.n_steps),
        )?;
        check(
            self.order == 1 || self.order == 2,
            "order",
            format!("{} is not in {{1, 2}}", self.order),
        )?;
        VpSchedule::new(self.beta0, self.beta1).map_err(|e| PipelineError::Param {
            key: "beta0/beta1".into(),
            message: e.to_string(),
        })?;
        check(
            self.temperature >= 0.0,
            "temperature",
            format!("{} must be >= 0", self.temperature),
        )?;
        check(
            self.t_end > 0.0 && self.t_end < self.t_start && self.t_start <= 1.0,
            "t_end",
            format!(
                "need 0 < t_end < t_start <= 1, got t_end={}, t_start={}",
                self.t_end, self.t_start
            ),
        )?;
        Ok(())
    }

    /// Parse and validate a JSON config file.
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| stage_err("config", e))?;
        let cfg: PlannerConfig = serde_json::from_str(&text).map_err(|e| stage_err("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validated copy with one parameter changed, mirroring runtime
    /// reconfiguration. Keys: n_steps, order, solver, beta0, beta1,
    /// temperature, t_end.
    pub fn with_param(&self, key: &str, value: &str) -> Result<PlannerConfig, PipelineError> {
        let mut cfg = self.clone();
        let bad = |msg: String| PipelineError::Param {
            key: key.into(),
            message: msg,
        };
        match key {
            "n_steps" => {
                cfg.n_steps = value
                    .parse()
                    .map_err(|_| bad(format!("'{value}' is not an integer")))?;
            }
            "order" => {
                cfg.order = value
                    .parse()
                    .map_err(|_| bad(format!("'{value}' is not an integer")))?;
            }
            "solver" => match value {
                "ddim" => cfg.solver = SolverFamily::Ddim,
                "dpm" => cfg.solver = SolverFamily::DpmPlusPlus,
                "dpm1" => {
                    cfg.solver = SolverFamily::DpmPlusPlus;
                    cfg.order = 1;
                }
                "dpm2" => {
                    cfg.solver = SolverFamily::DpmPlusPlus;
                    cfg.order = 2;
                }
                other => {
                    return Err(bad(format!(
                        "'{other}' is not one of ddim, dpm, dpm1, dpm2"
                    )))
                }
            },
            "beta0" => {
                cfg.beta0 = value
                    .parse()
                    .map_err(|_| bad(format!("'{value}' is not a number")))?;
            }
            "beta1" => {
                cfg.beta1 = value
                    .parse()
                    .map_err(|_| bad(format!("'{value}' is not a number")))?;
            }
            "temperature" => {
                cfg.temperature = value
                    .parse()
                    .map_err(|_| bad(format!("'{value}' is not a number")))?;
            }
            "t_end" => {
                cfg.t_end = value
                    .parse()
                    .map_err(|_| bad(format!("'{value}' is not a number")))?;
            }
            other => return Err(bad(format!("unknown parameter '{other}'"))),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The models one planner drives. The fingerprint digests all weight
/// payloads, letting tests assert that reconfiguration never touches them.
pub struct PlannerModels {
    pub encoder: Arc<dyn EncoderModel>,
    pub denoiser: Arc<dyn DenoiserModel>,
    pub head: LinearHead,
    fingerprint: [u8; 32],
}

impl PlannerModels {
    pub fn new(
        encoder: Arc<dyn EncoderModel>,
        denoiser: Arc<dyn DenoiserModel>,
        head: LinearHead,
        weight_fingerprints: &[[u8; 32]],
    ) -> Self {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(head.fingerprint());
        for f in weight_fingerprints {
            h.update(f);
        }
        Self {
            encoder,
            denoiser,
            head,
            fingerprint: h.finalize().into(),
        }
    }

    pub fn fingerprint(&self) -> [u8; 32] {
        self.fingerprint
    }
}

/// Per-cycle accounting: call counts and stage wall times.
#[derive(Debug, Clone, Serialize)]
pub struct CycleStats {
    pub n_steps: usize,
    pub solver: &'static str,
    pub caching_enabled: bool,
    pub encoder_calls: u64,
    pub core_calls: u64,
    pub encode_ms: f64,
    pub solve_ms: f64,
    pub head_ms: f64,
    pub total_ms: f64,
}

/// Everything one planning cycle produces.
#[derive(Debug)]
pub struct PlanOutcome {
    /// Physical-units trajectory, agents x timesteps x channels.
    pub trajectory: Tensor,
    /// Turn-indicator class in {0, 1, 2, 3}.
    pub turn: usize,
    pub trace: DenoisingTrace,
    pub stats: CycleStats,
}

/// Denoiser adapter for one cycle: fetches the embedding through the cache
/// before every core call (a cache hit when caching is enabled, a fresh
/// encode in monolithic emulation), counts invocations, and aborts on
/// non-finite state. The embedding argument run_solver forwards is ignored
/// in favor of the cache.
struct CycleDenoiser<'a> {
    cache: &'a EncoderCache,
    ctx: &'a SceneContext,
    inner: &'a dyn DenoiserModel,
    core_calls: AtomicU64,
    encode_ms: Mutex<f64>,
    embedding: Mutex<Option<ContextEmbedding>>,
}

impl DenoiserModel for CycleDenoiser<'_> {
    fn predict_x0(
        &self,
        x_t: &Tensor,
        _c: &ContextEmbedding,
        t: f64,
    ) -> Result<Tensor, DenoiseError> {
        if x_t.has_non_finite() {
            return Err(DenoiseError::Backend {
                t,
                message: NON_FINITE_MARKER.into(),
            });
        }
        let start = Instant::now();
        let (c, _) = self.cache.cached_encode(self.ctx)?;
        *self.encode_ms.lock().unwrap() += start.elapsed().as_secs_f64() * 1e3;
        self.embedding
            .lock()
            .unwrap()
            .get_or_insert_with(|| c.clone());
        self.core_calls.fetch_add(1, Ordering::SeqCst);
        let out = self.inner.predict_x0(x_t, &c, t)?;
        if out.has_non_finite() {
            return Err(DenoiseError::Backend {
                t,
                message: NON_FINITE_MARKER.into(),
            });
        }
        Ok(out)
    }
}

struct AnchorHooks<'a> {
    anchor: &'a AnchorSpec,
}

impl StepHooks for AnchorHooks<'_> {
    fn on_step(&mut self, _record: &StepRecord<'_>) {}

    fn after_update(&mut self, x: &mut Tensor, _step: usize, _t_next: f64) {
        self.anchor.apply(x);
    }
}

/// A configured planner instance. Single-threaded per instance; separate
/// instances are independent.
pub struct Planner {
    cfg: PlannerConfig,
    models: PlannerModels,
    traj_shape: TrajectoryShape,
    cache: EncoderCache,
}

impl Planner {
    pub fn new(
        cfg: PlannerConfig,
        models: PlannerModels,
        traj_shape: TrajectoryShape,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        cfg.anchor.validate(&traj_shape)?;
        if cfg.mu_norm.len() != traj_shape.channels {
            return Err(PipelineError::Param {
                key: "mu_norm".into(),
                message: format!(
                    "needs {} per-channel entries, got {}",
                    traj_shape.channels,
                    cfg.mu_norm.len()
                ),
            });
        }
        let cache = if cfg.monolithic_emulation {
            EncoderCache::passthrough(models.encoder.clone())
        } else {
            EncoderCache::new(models.encoder.clone(), 1)
        };
        Ok(Self {
            cfg,
            models,
            traj_shape,
            cache,
        })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    pub fn models(&self) -> &PlannerModels {
        &self.models
    }

    pub fn trajectory_shape(&self) -> TrajectoryShape {
        self.traj_shape
    }

    /// Default probe points for trace export: the ego final waypoint.
    pub fn default_probes(&self) -> ProbeSpec {
        ProbeSpec {
            points: vec![(0, self.traj_shape.timesteps - 1)],
        }
    }

    /// Runtime reconfiguration: validates and swaps the config without
    /// touching models or caches.
    pub fn set_param(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        self.cfg = self.cfg.with_param(key, value)?;
        Ok(())
    }

    /// One full planning cycle on a dedicated logSNR-uniform grid.
    pub fn plan(&self, ctx: &SceneContext) -> Result<PlanOutcome, PipelineError> {
        let sched = VpSchedule::new(self.cfg.beta0, self.cfg.beta1)
            .map_err(|e| stage_err("schedule", e))?;
        let grid = TimestepGrid::log_snr_uniform(
            &sched,
            self.cfg.n_steps,
            self.cfg.t_start,
            self.cfg.t_end,
        )
        .map_err(|e| stage_err("schedule", e))?;
        self.plan_with_grid(ctx, &sched, &grid)
    }

    /// One planning cycle on an explicit grid (the truncation study feeds
    /// a prefix of a longer grid here).
    pub fn plan_with_grid(
        &self,
        ctx: &SceneContext,
        sched: &VpSchedule,
        grid: &TimestepGrid,
    ) -> Result<PlanOutcome, PipelineError> {
        let total_start = Instant::now();
        // a fresh cycle: the capacity-1 cache covers the current cycle only
        self.cache.clear();
        let enc_before = self.cache.encoder_calls();

        // initialization: temperature * standard normal, zeros at 0
        let mut x_init = self.traj_shape.zeros();
        if self.cfg.temperature > 0.0 {
            let noise = crate::denoise::seeded_standard_normals(self.cfg.noise_seed, x_init.len());
            for (x, n) in x_init.data_mut().iter_mut().zip(noise) {
                *x = self.cfg.temperature * n;
            }
        }

        let adapter = CycleDenoiser {
            cache: &self.cache,
            ctx,
            inner: self.models.denoiser.as_ref(),
            core_calls: AtomicU64::new(0),
            encode_ms: Mutex::new(0.0),
            embedding: Mutex::new(None),
        };
        let placeholder =
            ContextEmbedding::new(Tensor::zeros(vec![1, 1])).expect("placeholder embedding");
        let mut hooks = AnchorHooks {
            anchor: &self.cfg.anchor,
        };

        let solve_start = Instant::now();
        let kind = self.cfg.effective_kind();
        let (x_final, mut trace) = run_solver(
            kind,
            sched,
            grid,
            &adapter,
            &placeholder,
            x_init,
            &mut hooks,
        )
        .map_err(|e| match e {
            SolverError::Denoiser { step, ref source }
                if source.to_string().contains(NON_FINITE_MARKER) =>
            {
                PipelineError::NonFinite { step }
            }
            other => stage_err("solver", other),
        })?;

        // final denoise-to-zero at the last grid time
        let n = grid.n_steps();
        let t_last = grid.t_end();
        let mut final_x0 = adapter
            .predict_x0(&x_final, &placeholder, t_last)
            .map_err(|e| {
                if e.to_string().contains(NON_FINITE_MARKER) {
                    PipelineError::NonFinite { step: n }
                } else {
                    stage_err("denoise-to-zero", e)
                }
            })?;
        // the current-state slot of the prediction carries the observed
        // state, matching the padded T-1 -> T output contract
        self.cfg.anchor.apply(&mut final_x0);
        let solve_ms = solve_start.elapsed().as_secs_f64() * 1e3;
        trace.final_t = Some(t_last);
        trace.final_x0 = Some(final_x0.clone());

        // turn-indicator head
        let head_start = Instant::now();
        let embedding = adapter
            .embedding
            .lock()
            .unwrap()
            .clone()
            .expect("at least one core call ran");
        let turn = self
            .models
            .head
            .turn_indicator(&final_x0, &embedding)
            .map_err(|e| stage_err("head", e))?;
        let head_ms = head_start.elapsed().as_secs_f64() * 1e3;

        // denormalization: positions scale by sigma_norm, headings pass
        // through, per-channel offsets added
        let trajectory = self.denormalize(&final_x0);

        let encode_ms = *adapter.encode_ms.lock().unwrap();
        let stats = CycleStats {
            n_steps: n,
            solver: kind.label(),
            caching_enabled: self.cache.caching_enabled(),
            encoder_calls: self.cache.encoder_calls() - enc_before,
            core_calls: adapter.core_calls.load(Ordering::SeqCst),
            encode_ms,
            solve_ms,
            head_ms,
            total_ms: total_start.elapsed().as_secs_f64() * 1e3,
        };
        Ok(PlanOutcome {
            trajectory,
            turn,
            trace,
            stats,
        })
    }

    fn denormalize(&self, x_norm: &Tensor) -> Tensor {
        let mut out = x_norm.clone();
        let channels = self.traj_shape.channels;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i % channels;
            if ch < 2 {
                *v = *v * self.cfg.sigma_norm_m + self.cfg.mu_norm[ch];
            } else {
                *v += self.cfg.mu_norm[ch];
            }
        }
        out
    }
}

/// Write the trace as JSONL with probe values and the relative error to
/// the final prediction.
pub fn export_trace(
    trace: &DenoisingTrace,
    path: impl AsRef<std::path::Path>,
    probes: &ProbeSpec,
) -> Result<(), PipelineError> {
    if trace.steps.is_empty() {
        return Err(stage_err("trace", "trace is empty"));
    }
    let file = std::fs::File::create(path).map_err(|e| stage_err("trace", e))?;
    trace
        .write_jsonl(std::io::BufWriter::new(file), probes)
        .map_err(|e| stage_err("trace", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{GaussianDenoiser, GaussianFixture};

    const SHAPE: TrajectoryShape = TrajectoryShape {
        agents: 3,
        timesteps: 9,
        channels: 4,
    };

    struct FixedEncoder;
    impl EncoderModel for FixedEncoder {
        fn encode(&self, ctx: &SceneContext) -> Result<ContextEmbedding, DenoiseError> {
            let s: f64 = ctx.flatten().iter().sum();
            ContextEmbedding::new(Tensor::filled(vec![4, 2], s))
        }
    }

    fn models() -> PlannerModels {
        let fixture = GaussianFixture {
            seed: 11,
            shape: SHAPE.dims(),
            variance: 0.25,
        };
        let den = GaussianDenoiser::from_fixture(&fixture, VpSchedule::default()).unwrap();
        let fp = den.fingerprint();
        let head = LinearHead::zeros(SHAPE.timesteps * SHAPE.channels + 2);
        PlannerModels::new(Arc::new(FixedEncoder), Arc::new(den), head, &[fp])
    }

    fn ctx() -> SceneContext {
        SceneContext::seeded(3, [6, 4, 4, 2, 1, 1])
    }

    fn anchored_cfg() -> PlannerConfig {
        PlannerConfig {
            anchor: AnchorSpec::ego_current(vec![0.25, -0.5, 1.0, 0.0]),
            ..PlannerConfig::default()
        }
    }

    #[test]
    fn cached_cycle_counts_calls() {
        let planner = Planner::new(anchored_cfg(), models(), SHAPE).unwrap();
        let out = planner.plan(&ctx()).unwrap();
        assert_eq!(out.stats.encoder_calls, 1);
        assert_eq!(out.stats.core_calls, 11);
        assert_eq!(out.trace.steps.len(), 10);
        // a second cycle re-fills the per-cycle cache
        let out2 = planner.plan(&ctx()).unwrap();
        assert_eq!(out2.stats.encoder_calls, 1);
    }

    #[test]
    fn monolithic_emulation_reencodes() {
        let cfg = PlannerConfig {
            monolithic_emulation: true,
            ..anchored_cfg()
        };
        let planner = Planner::new(cfg, models(), SHAPE).unwrap();
        let out = planner.plan(&ctx()).unwrap();
        assert_eq!(out.stats.encoder_calls, 11);
        assert_eq!(out.stats.core_calls, 11);
    }

    #[test]
    fn plan_is_deterministic_at_zero_temperature() {
        let planner = Planner::new(anchored_cfg(), models(), SHAPE).unwrap();
        let a = planner.plan(&ctx()).unwrap();
        let b = planner.plan(&ctx()).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.turn, b.turn);
        assert_eq!(a.trace.final_x0, b.trace.final_x0);
    }

    #[test]
    fn anchored_slice_survives_to_final_prediction() {
        let cfg = anchored_cfg();
        let anchor = cfg.anchor.clone();
        let planner = Planner::new(cfg, models(), SHAPE).unwrap();
        let out = planner.plan(&ctx()).unwrap();
        assert!(anchor.holds_in(out.trace.final_x0.as_ref().unwrap()));
    }

    #[test]
    fn denormalization_scales_positions_only() {
        let cfg = PlannerConfig {
            mu_norm: vec![1.0, 2.0, 0.0, 0.0],
            ..anchored_cfg()
        };
        let planner = Planner::new(cfg, models(), SHAPE).unwrap();
        let out = planner.plan(&ctx()).unwrap();
        let norm = out.trace.final_x0.as_ref().unwrap();
        let phys = &out.trajectory;
        for a in 0..SHAPE.agents {
            for t in 0..SHAPE.timesteps {
                assert_eq!(phys.at(&[a, t, 0]), norm.at(&[a, t, 0]) * 20.0 + 1.0);
                assert_eq!(phys.at(&[a, t, 1]), norm.at(&[a, t, 1]) * 20.0 + 2.0);
                assert_eq!(phys.at(&[a, t, 2]), norm.at(&[a, t, 2]));
                assert_eq!(phys.at(&[a, t, 3]), norm.at(&[a, t, 3]));
            }
        }
    }

    #[test]
    fn set_param_validates_and_keeps_models() {
        let mut planner = Planner::new(anchored_cfg(), models(), SHAPE).unwrap();
        let fp = planner.models().fingerprint();
        let enc = planner.models().encoder.clone();
        planner.set_param("n_steps", "3").unwrap();
        let out = planner.plan(&ctx()).unwrap();
        assert_eq!(out.stats.core_calls, 4);
        assert_eq!(planner.models().fingerprint(), fp);
        assert!(Arc::ptr_eq(&enc, &planner.models().encoder));

        let err = planner.set_param("n_steps", "51").unwrap_err();
        assert!(err.to_string().contains("[1, 50]"), "{err}");
        assert!(planner.set_param("n_steps", "0").is_err());
        assert!(planner.set_param("order", "3").is_err());
        assert!(planner.set_param("nope", "1").is_err());
    }

    #[test]
    fn order_changes_output_at_small_step_count() {
        let mut planner = Planner::new(anchored_cfg(), models(), SHAPE).unwrap();
        planner.set_param("n_steps", "3").unwrap();
        planner.set_param("order", "1").unwrap();
        let first = planner.plan(&ctx()).unwrap();
        planner.set_param("order", "2").unwrap();
        let second = planner.plan(&ctx()).unwrap();
        assert_ne!(first.trajectory, second.trajectory);
    }

    #[test]
    fn temperature_zero_starts_from_zeros() {
        // the first prediction equals the denoiser applied to zeros
        let planner = Planner::new(anchored_cfg(), models(), SHAPE).unwrap();
        let out = planner.plan(&ctx()).unwrap();
        let m = models();
        let emb = m.encoder.encode(&ctx()).unwrap();
        let expect = m.denoiser.predict_x0(&SHAPE.zeros(), &emb, 1.0).unwrap();
        assert_eq!(out.trace.steps[0].x0_hat, expect);
    }

    #[test]
    fn nan_input_aborts_with_step_index() {
        struct NanDenoiser;
        impl DenoiserModel for NanDenoiser {
            fn predict_x0(
                &self,
                x_t: &Tensor,
                _c: &ContextEmbedding,
                _t: f64,
            ) -> Result<Tensor, DenoiseError> {
                let mut out = x_t.clone();
                out.data_mut()[0] = f64::NAN;
                Ok(out)
            }
        }
        let m = PlannerModels::new(
            Arc::new(FixedEncoder),
            Arc::new(NanDenoiser),
            LinearHead::zeros(SHAPE.timesteps * SHAPE.channels + 2),
            &[],
        );
        let planner = Planner::new(PlannerConfig::default(), m, SHAPE).unwrap();
        match planner.plan(&ctx()) {
            Err(PipelineError::NonFinite { step }) => assert_eq!(step, 0),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn export_trace_writes_step_and_final_lines() {
        let planner = Planner::new(anchored_cfg(), models(), SHAPE).unwrap();
        let out = planner.plan(&ctx()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let probes = ProbeSpec {
            points: vec![(0, SHAPE.timesteps - 1)],
        };
        export_trace(&out.trace, &path, &probes).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 11);
        let last: serde_json::Value = serde_json::from_str(lines[10]).unwrap();
        assert_eq!(last["rel_err_to_final"], 0.0);
        assert_eq!(last["final"], true);
    }

    #[test]
    fn config_json_round_trips_with_defaults() {
        let cfg = PlannerConfig {
            n_steps: 7,
            order: 1,
            anchor: AnchorSpec::ego_current(vec![0.1, 0.2, 1.0, 0.0]),
            ..PlannerConfig::default()
        };
        let text = cfg.to_json_string();
        let back: PlannerConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        // omitted fields fall back to defaults; bad values are rejected
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"n_steps": 5, "solver": "ddim"}"#).unwrap();
        let loaded = PlannerConfig::from_json_file(&path).unwrap();
        assert_eq!(loaded.n_steps, 5);
        assert_eq!(loaded.solver, SolverFamily::Ddim);
        assert_eq!(loaded.beta0, crate::schedule::DEFAULT_BETA0);
        std::fs::write(&path, r#"{"n_steps": 99}"#).unwrap();
        assert!(PlannerConfig::from_json_file(&path).is_err());
    }

    #[test]
    fn bad_configs_are_rejected() {
        let cfg = PlannerConfig {
            n_steps: 0,
            ..PlannerConfig::default()
        };
        assert!(Planner::new(cfg, models(), SHAPE).is_err());
        let cfg = PlannerConfig {
            anchor: AnchorSpec::ego_current(vec![0.0; 4]),
            ..PlannerConfig::default()
        };
        // anchor agent out of bounds for a 1-agent shape is caught
        let tiny = TrajectoryShape::new(1, 2, 4);
        let mut bad_anchor = cfg;
        bad_anchor.anchor.entries[0].agent = 5;
        assert!(matches!(
            Planner::new(bad_anchor, models(), tiny),
            Err(PipelineError::AnchorOutOfBounds { .. })
        ));
    }
}
