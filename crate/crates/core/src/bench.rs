//! Benchmark harness: latency models, solver sweeps, and Pareto analysis.
//!
//! The latency models carry the measured per-component costs and reproduce
//! the planning-cycle arithmetic for the monolithic (encoder fused into
//! every step) and modular (encoder cached) call patterns. The sweep
//! replays seeded Gaussian scenes through every solver configuration and
//! reports displacement errors against the second-order 10-step reference,
//! alongside modeled and measured latencies.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::denoise::{
    ContextEmbedding, DenoiseError, EncoderModel, GaussianDenoiser, GaussianFixture, LinearHead,
    SceneContext, TrajectoryShape,
};
use crate::pipeline::{
    AnchorSpec, PipelineError, Planner, PlannerConfig, PlannerModels, SolverFamily,
};
use crate::schedule::{TimestepGrid, VpSchedule};
use crate::solver::SolverKind;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("latency components must be >= 0")]
    NegativeLatency,
    #[error("trajectories must be rank-3 with matching shapes and >= 2 timesteps, got {pred:?} vs {reference:?}")]
    BadTrajectoryShapes {
        pred: Vec<usize>,
        reference: Vec<usize>,
    },
    #[error("sweep needs at least one scene")]
    EmptyFixture,
    #[error("truncation study needs n_small <= n_full")]
    BadTruncation,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error("csv i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-component latencies in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyModel {
    pub t_enc_ms: f64,
    pub t_dit_ms: f64,
    pub t_sol_ms: f64,
}

impl LatencyModel {
    pub fn new(t_enc_ms: f64, t_dit_ms: f64, t_sol_ms: f64) -> Result<Self, BenchError> {
        if t_enc_ms < 0.0 || t_dit_ms < 0.0 || t_sol_ms < 0.0 {
            return Err(BenchError::NegativeLatency);
        }
        Ok(Self {
            t_enc_ms,
            t_dit_ms,
            t_sol_ms,
        })
    }

    /// The measured CPU breakdown: encoder 27.5 ms, core step 2.3 ms,
    /// solver update 0.01 ms.
    pub fn cpu_reference() -> Self {
        Self {
            t_enc_ms: 27.5,
            t_dit_ms: 2.3,
            t_sol_ms: 0.01,
        }
    }
}

/// Monolithic cycle cost: the fused graph re-runs the encoder at every
/// core invocation: `(N+1) T_enc + (N+1) T_dit + N T_sol`.
pub fn latency_mono(m: &LatencyModel, n: usize) -> f64 {
    let n1 = (n + 1) as f64;
    n1 * m.t_enc_ms + n1 * m.t_dit_ms + n as f64 * m.t_sol_ms
}

/// Modular cycle cost with encoder caching:
/// `T_enc + (N+1) T_dit + N T_sol`.
pub fn latency_mod(m: &LatencyModel, n: usize) -> f64 {
    m.t_enc_ms + (n + 1) as f64 * m.t_dit_ms + n as f64 * m.t_sol_ms
}

/// Final and average displacement error of the ego agent's future
/// waypoints, in the trajectories' (physical) units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DisplacementErrors {
    pub fde_m: f64,
    pub ade_m: f64,
}

/// FDE is the Euclidean distance at the final waypoint; ADE the mean over
/// the future waypoints (time indices 1..T, slot 0 is the anchored current
/// state). Positions are channels 0 and 1 of agent 0.
pub fn displacement_errors(
    pred: &Tensor,
    reference: &Tensor,
) -> Result<DisplacementErrors, BenchError> {
    if pred.rank() != 3 || pred.shape() != reference.shape() || pred.shape()[1] < 2 {
        return Err(BenchError::BadTrajectoryShapes {
            pred: pred.shape().to_vec(),
            reference: reference.shape().to_vec(),
        });
    }
    let times = pred.shape()[1];
    let dist = |t: usize| {
        let dx = pred.at(&[0, t, 0]) - reference.at(&[0, t, 0]);
        let dy = pred.at(&[0, t, 1]) - reference.at(&[0, t, 1]);
        (dx * dx + dy * dy).sqrt()
    };
    let fde_m = dist(times - 1);
    let ade_m = (1..times).map(dist).sum::<f64>() / (times - 1) as f64;
    Ok(DisplacementErrors { fde_m, ade_m })
}

/// Deterministic stand-in encoder: the embedding is a seeded projection of
/// the flattened context. Cheap, but a real function of the scene bytes so
/// caching stays observable.
pub struct HashProjectionEncoder {
    rows: usize,
    cols: usize,
}

impl HashProjectionEncoder {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }
}

impl EncoderModel for HashProjectionEncoder {
    fn encode(&self, ctx: &SceneContext) -> Result<ContextEmbedding, DenoiseError> {
        let flat = ctx.flatten();
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows * self.cols {
            let mut acc = 0.0;
            for (j, v) in flat.iter().enumerate() {
                let phase = ((i * 31 + j * 17) % 97) as f64 / 97.0;
                acc += v * (2.0 * std::f64::consts::PI * phase).cos();
            }
            data.push(acc / (flat.len().max(1) as f64).sqrt());
        }
        ContextEmbedding::new(Tensor::new(vec![self.rows, self.cols], data)?)
    }
}

/// One seeded benchmark scene.
pub struct Scene {
    pub ctx: SceneContext,
    pub denoiser: Arc<GaussianDenoiser>,
    pub anchor: AnchorSpec,
}

/// Seeded Gaussian scenes standing in for replayed driving frames.
pub struct SweepFixture {
    pub shape: TrajectoryShape,
    pub scenes: Vec<Scene>,
    pub encoder: Arc<HashProjectionEncoder>,
    pub embed_dim: usize,
}

impl SweepFixture {
    pub fn gaussian(
        seed: u64,
        n_scenes: usize,
        shape: TrajectoryShape,
    ) -> Result<Self, BenchError> {
        let embed_rows = 4;
        let embed_dim = 8;
        let encoder = Arc::new(HashProjectionEncoder::new(embed_rows, embed_dim));
        let mut scenes = Vec::with_capacity(n_scenes);
        for i in 0..n_scenes {
            let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let ctx = SceneContext::seeded(scene_seed, [8, 6, 6, 4, 2, 2]);
            let fixture = GaussianFixture {
                seed: scene_seed ^ 0x5eed,
                shape: shape.dims(),
                variance: 0.25,
            };
            let denoiser = Arc::new(GaussianDenoiser::from_fixture(
                &fixture,
                VpSchedule::default(),
            )?);
            // observed current state: the scene prior's ego slot
            let state: Vec<f64> = (0..shape.channels)
                .map(|ch| denoiser.mean().at(&[0, 0, ch]))
                .collect();
            scenes.push(Scene {
                ctx,
                denoiser,
                anchor: AnchorSpec::ego_current(state),
            });
        }
        Ok(Self {
            shape,
            scenes,
            encoder,
            embed_dim,
        })
    }

    fn planner(&self, scene: &Scene, cfg: PlannerConfig) -> Result<Planner, BenchError> {
        let head_features = self.shape.timesteps * self.shape.channels + self.embed_dim;
        let models = PlannerModels::new(
            self.encoder.clone(),
            scene.denoiser.clone(),
            LinearHead::zeros(head_features),
            &[scene.denoiser.fingerprint()],
        );
        let cfg = PlannerConfig {
            anchor: scene.anchor.clone(),
            ..cfg
        };
        Ok(Planner::new(cfg, models, self.shape)?)
    }

    fn config_for(&self, kind: SolverKind, n_steps: usize) -> PlannerConfig {
        PlannerConfig {
            n_steps,
            order: kind.order(),
            solver: match kind {
                SolverKind::Ddim => SolverFamily::Ddim,
                _ => SolverFamily::DpmPlusPlus,
            },
            ..PlannerConfig::default()
        }
    }

    /// Physical reference trajectories, one per scene.
    pub fn reference_runs(&self, reference_cfg: &PlannerConfig) -> Result<Vec<Tensor>, BenchError> {
        self.scenes
            .iter()
            .map(|s| {
                let planner = self.planner(s, reference_cfg.clone())?;
                Ok(planner.plan(&s.ctx)?.trajectory)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

/// One sweep configuration aggregated over scenes.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub solver: SolverKind,
    pub order: u8,
    pub n_steps: usize,
    pub fde_m: f64,
    pub fde_sigma_m: f64,
    pub ade_m: f64,
    pub ade_sigma_m: f64,
    pub latency_model_ms: f64,
    pub latency_measured_ms: f64,
    pub encoder_calls: u64,
    pub core_calls: u64,
    pub is_reference: bool,
    pub status: RowStatus,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub scenes: usize,
    pub seed: u64,
}

pub const SWEEP_CSV_SCHEMA: &str = "# diffsolve-sweep-csv v1";

impl SweepResult {
    /// CSV dump. The deterministic section excludes the measured-latency
    /// column, so identical seeds produce identical bytes.
    pub fn write_csv(&self, mut w: impl Write, include_measured: bool) -> Result<(), BenchError> {
        writeln!(w, "{SWEEP_CSV_SCHEMA}")?;
        let mut header = String::from(
            "solver,order,n_steps,fde_m,fde_sigma_m,ade_m,ade_sigma_m,latency_model_ms,encoder_calls,core_calls,reference,status",
        );
        if include_measured {
            header.push_str(",latency_measured_ms");
        }
        writeln!(w, "{header}")?;
        for r in &self.rows {
            let status = match &r.status {
                RowStatus::Ok => "ok".to_string(),
                RowStatus::Failed(msg) => format!("failed: {}", msg.replace(',', ";")),
            };
            let mut line = format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.solver.label(),
                r.order,
                r.n_steps,
                r.fde_m,
                r.fde_sigma_m,
                r.ade_m,
                r.ade_sigma_m,
                r.latency_model_ms,
                r.encoder_calls,
                r.core_calls,
                r.is_reference,
                status
            );
            if include_measured {
                line.push_str(&format!(",{}", r.latency_measured_ms));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn csv_string(&self, include_measured: bool) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, include_measured)
            .expect("write to Vec cannot fail");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

fn mean_sigma(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run every (solver, N) configuration over the fixture scenes; errors are
/// measured against the reference configuration per scene and averaged.
/// Wall-clock timing runs one warm-up cycle per configuration, then times
/// one cycle per scene sequentially.
pub fn run_sweep(
    fixture: &SweepFixture,
    kinds: &[SolverKind],
    step_counts: &[usize],
    reference_cfg: &PlannerConfig,
    latency: &LatencyModel,
    seed: u64,
) -> Result<SweepResult, BenchError> {
    if fixture.scenes.is_empty() {
        return Err(BenchError::EmptyFixture);
    }
    let references = fixture.reference_runs(reference_cfg)?;
    let ref_kind = PlannerConfig {
        anchor: AnchorSpec::none(),
        ..reference_cfg.clone()
    }
    .effective_kind();

    let mut rows = Vec::new();
    for &kind in kinds {
        for &n in step_counts {
            let cfg = fixture.config_for(kind, n);
            let is_reference = kind == ref_kind && n == reference_cfg.n_steps;
            let mut fdes = Vec::new();
            let mut ades = Vec::new();
            let mut times_ms = Vec::new();
            let mut enc_calls = 0u64;
            let mut core_calls = 0u64;
            let mut failure: Option<String> = None;
            for (scene, reference) in fixture.scenes.iter().zip(&references) {
                let mut run = || -> Result<(), BenchError> {
                    let planner = fixture.planner(scene, cfg.clone())?;
                    planner.plan(&scene.ctx)?; // warm-up
                    let start = Instant::now();
                    let out = planner.plan(&scene.ctx)?;
                    times_ms.push(start.elapsed().as_secs_f64() * 1e3);
                    let err = displacement_errors(&out.trajectory, reference)?;
                    fdes.push(err.fde_m);
                    ades.push(err.ade_m);
                    enc_calls = out.stats.encoder_calls;
                    core_calls = out.stats.core_calls;
                    Ok(())
                };
                if let Err(e) = run() {
                    failure = Some(e.to_string());
                    break;
                }
            }
            let (fde_m, fde_sigma_m) = mean_sigma(&fdes);
            let (ade_m, ade_sigma_m) = mean_sigma(&ades);
            let (lat_measured, _) = mean_sigma(&times_ms);
            rows.push(SweepRow {
                solver: kind,
                order: kind.order(),
                n_steps: n,
                fde_m,
                fde_sigma_m,
                ade_m,
                ade_sigma_m,
                latency_model_ms: latency_mod(latency, n),
                latency_measured_ms: lat_measured,
                encoder_calls: enc_calls,
                core_calls,
                is_reference,
                status: match failure {
                    None => RowStatus::Ok,
                    Some(msg) => RowStatus::Failed(msg),
                },
            });
        }
    }
    rows.sort_by(|a, b| {
        (a.solver.label(), a.order, a.n_steps).cmp(&(b.solver.label(), b.order, b.n_steps))
    });
    Ok(SweepResult {
        rows,
        scenes: fixture.scenes.len(),
        seed,
    })
}

/// Dedicated-vs-truncated schedule comparison.
#[derive(Debug, Clone, Serialize)]
pub struct TruncationComparison {
    pub n_full: usize,
    pub n_small: usize,
    pub dedicated_fde_m: f64,
    pub truncated_fde_m: f64,
    /// truncated / dedicated; 1 when both legs are identical.
    pub ratio: f64,
    /// Mean relative error of each in-loop prediction to the converged
    /// reference prediction, per step. The early-stopped leg never leaves
    /// the refinement phase, which shows up here.
    pub dedicated_step_rel_err: Vec<f64>,
    pub truncated_step_rel_err: Vec<f64>,
}

/// Relative error of every in-loop prediction (and the final one) to a
/// converged reference prediction, in normalized units.
fn step_rel_errors(trace: &crate::solver::DenoisingTrace, reference: &Tensor) -> Vec<f64> {
    let norm = reference.l2_norm().max(f64::MIN_POSITIVE);
    let rel = |t: &Tensor| {
        t.sub(reference)
            .map(|d| d.l2_norm() / norm)
            .unwrap_or(f64::INFINITY)
    };
    let mut out: Vec<f64> = trace.steps.iter().map(|e| rel(&e.x0_hat)).collect();
    out.push(rel(trace.final_x0.as_ref().expect("pipeline sets final")));
    out
}

/// Compare (a) a dedicated logSNR-uniform schedule with `n_small` steps
/// against (b) the first `n_small` updates of the `n_full` schedule with
/// denoise-to-zero at the early stop, both scored against the `n_full`
/// second-order reference.
pub fn truncation_study(
    fixture: &SweepFixture,
    n_full: usize,
    n_small: usize,
) -> Result<TruncationComparison, BenchError> {
    if n_small > n_full || n_small == 0 {
        return Err(BenchError::BadTruncation);
    }
    if fixture.scenes.is_empty() {
        return Err(BenchError::EmptyFixture);
    }
    let reference_cfg = PlannerConfig {
        n_steps: n_full,
        ..PlannerConfig::default()
    };
    let sched = VpSchedule::default();
    let full_grid =
        TimestepGrid::log_snr_uniform(&sched, n_full, reference_cfg.t_start, reference_cfg.t_end)
            .map_err(PipelineError::from)?;
    let truncated_grid = full_grid.truncate(n_small).map_err(PipelineError::from)?;

    let mut ded_fdes = Vec::new();
    let mut tru_fdes = Vec::new();
    let mut ded_rel: Vec<Vec<f64>> = Vec::new();
    let mut tru_rel: Vec<Vec<f64>> = Vec::new();
    for scene in &fixture.scenes {
        let ref_planner = fixture.planner(scene, reference_cfg.clone())?;
        let reference_run = ref_planner.plan(&scene.ctx)?;
        let reference_x0 = reference_run
            .trace
            .final_x0
            .as_ref()
            .expect("pipeline sets final");

        let cfg_small = PlannerConfig {
            n_steps: n_small,
            ..PlannerConfig::default()
        };
        let planner = fixture.planner(scene, cfg_small)?;
        let dedicated = planner.plan(&scene.ctx)?;
        let truncated = planner.plan_with_grid(&scene.ctx, &sched, &truncated_grid)?;
        ded_fdes.push(displacement_errors(&dedicated.trajectory, &reference_run.trajectory)?.fde_m);
        tru_fdes.push(displacement_errors(&truncated.trajectory, &reference_run.trajectory)?.fde_m);
        ded_rel.push(step_rel_errors(&dedicated.trace, reference_x0));
        tru_rel.push(step_rel_errors(&truncated.trace, reference_x0));
    }
    let (dedicated_fde_m, _) = mean_sigma(&ded_fdes);
    let (truncated_fde_m, _) = mean_sigma(&tru_fdes);
    let ratio = if dedicated_fde_m == 0.0 && truncated_fde_m == 0.0 {
        1.0
    } else {
        truncated_fde_m / dedicated_fde_m
    };
    let mean_per_step = |per_scene: &[Vec<f64>]| -> Vec<f64> {
        let steps = per_scene.first().map(|v| v.len()).unwrap_or(0);
        (0..steps)
            .map(|i| per_scene.iter().map(|v| v[i]).sum::<f64>() / per_scene.len() as f64)
            .collect()
    };
    Ok(TruncationComparison {
        n_full,
        n_small,
        dedicated_fde_m,
        truncated_fde_m,
        ratio,
        dedicated_step_rel_err: mean_per_step(&ded_rel),
        truncated_step_rel_err: mean_per_step(&tru_rel),
    })
}

/// A candidate operating point for the latency/accuracy frontier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParetoPoint {
    pub label: String,
    pub latency_ms: f64,
    pub fde_m: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BudgetVerdict {
    pub point: ParetoPoint,
    pub on_frontier: bool,
    pub within_budget: bool,
}

/// Non-dominated set under joint (latency, FDE) minimization, with a
/// budget verdict per point. Output order is canonical (latency, error,
/// label), so the result is invariant to input order.
pub fn pareto(points: &[ParetoPoint], budget_ms: f64) -> Vec<BudgetVerdict> {
    let dominated = |p: &ParetoPoint| {
        points.iter().any(|q| {
            q.latency_ms <= p.latency_ms
                && q.fde_m <= p.fde_m
                && (q.latency_ms < p.latency_ms || q.fde_m < p.fde_m)
        })
    };
    let mut out: Vec<BudgetVerdict> = points
        .iter()
        .map(|p| BudgetVerdict {
            on_frontier: !dominated(p),
            within_budget: p.latency_ms <= budget_ms,
            point: p.clone(),
        })
        .collect();
    out.sort_by(|a, b| {
        (a.point.latency_ms, a.point.fde_m, a.point.label.as_str())
            .partial_cmp(&(b.point.latency_ms, b.point.fde_m, b.point.label.as_str()))
            .expect("finite latencies and errors")
    });
    out
}

/// Least-squares affine fit `y = a + b x`; returns (a, b, max residual).
pub fn affine_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let max_resid = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (a + b * x)).abs())
        .fold(0.0, f64::max);
    (a, b, max_resid)
}
