//! Numerical-equivalence validation between the monolithic graph and the
//! extracted module composition.
//!
//! Per-module errors compare each module against the monolithic graph's
//! internal tensors on identical inputs. The end-to-end check re-runs the
//! unrolled loop externally: the solver coefficients are recomputed in f64
//! from the schedule (the monolithic graph carries f32-quantized baked
//! constants), so the measured error reflects genuine accumulated rounding
//! across the boundary, which must stay under the thresholds.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::schedule::VpSchedule;
use crate::tensor::Tensor;

use super::extract::ExtractedModules;
use super::interp::{interpret, interpret_all};
use super::model::Graph;
use super::GraphError;

#[derive(Debug, Clone)]
pub struct ValidateConfig {
    pub schedule: VpSchedule,
    pub seed: u64,
    /// Physical scale applied to the normalized end-to-end error bound.
    pub sigma_norm_m: f64,
    pub per_module_threshold: f64,
    pub end_to_end_threshold: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            schedule: VpSchedule::default(),
            seed: 7,
            sigma_norm_m: 20.0,
            per_module_threshold: 1e-5,
            end_to_end_threshold: 1e-4,
        }
    }
}

/// Max element-wise absolute errors over all trials.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub n_steps: usize,
    pub encoder_max_abs_err: f64,
    pub core_max_abs_err: f64,
    pub head_max_abs_err: f64,
    pub end_to_end_max_abs_err: f64,
    /// `end_to_end_max_abs_err * sigma_norm_m`, in meters.
    pub physical_bound_m: f64,
    pub per_module_threshold: f64,
    pub end_to_end_threshold: f64,
    pub pass: bool,
}

fn random_feed(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn max_err(a: &Tensor, b: &Tensor) -> Result<f64, GraphError> {
    a.max_abs_diff(b)
        .map_err(|e| GraphError::Validation(e.to_string()))
}

/// Run `trials` random inputs through both paths and report the maximum
/// element-wise absolute error per module and end to end after `n_steps`
/// external solver updates (which must match the unroll depth).
pub fn validate_equivalence(
    mono: &Graph,
    modules: &ExtractedModules,
    n_steps: usize,
    trials: usize,
    cfg: &ValidateConfig,
) -> Result<EquivalenceReport, GraphError> {
    let copies = modules.copy_time_values.len();
    if n_steps + 1 != copies {
        return Err(GraphError::Validation(format!(
            "n_steps={n_steps} does not match the {copies}-copy unroll (need n_steps = copies - 1)"
        )));
    }
    let io = &modules.io;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // timesteps as the external solver would use them: full f64 from the
    // quantized promoted constants' time positions
    let times = &modules.copy_time_values;

    let mut enc_err: f64 = 0.0;
    let mut core_err: f64 = 0.0;
    let mut head_err: f64 = 0.0;
    let mut e2e_err: f64 = 0.0;

    for _ in 0..trials.max(1) {
        let mut feeds = BTreeMap::new();
        for decl in &mono.inputs {
            feeds.insert(decl.name.clone(), random_feed(&mut rng, &decl.shape));
        }
        let mono_vals = interpret_all(mono, &feeds)?;

        // encoder: same scene inputs
        let mut enc_feeds = BTreeMap::new();
        for decl in &modules.encoder.inputs {
            enc_feeds.insert(decl.name.clone(), feeds[&decl.name].clone());
        }
        let enc_out = interpret(&modules.encoder, &enc_feeds)?;
        let c_mod = enc_out[&io.encoder_output].clone();
        enc_err = enc_err.max(max_err(&c_mod, &mono_vals[&io.encoder_output])?);

        // core: monolithic copy-0 inputs captured from the interpretation
        let t0 = Tensor::new(vec![1, 1], vec![times[0]]).unwrap();
        let core_feeds = BTreeMap::from([
            (
                io.core_state_input.clone(),
                mono_vals[&io.core_state_input].clone(),
            ),
            (
                io.core_context_input.clone(),
                mono_vals[&io.core_context_input].clone(),
            ),
            (io.core_time_input.clone(), t0),
        ]);
        let core_out = interpret(&modules.core, &core_feeds)?;
        core_err = core_err.max(max_err(
            &core_out[&io.core_output],
            &mono_vals[&io.core_output],
        )?);

        // head: monolithic head inputs captured likewise
        let mut head_feeds = BTreeMap::new();
        for name in &io.head_inputs {
            head_feeds.insert(name.clone(), mono_vals[name].clone());
        }
        let head_out = interpret(&modules.head, &head_feeds)?;
        head_err = head_err.max(max_err(
            &head_out[&io.head_output],
            &mono_vals[&io.head_output],
        )?);

        // end to end: external f64 solver around the extracted core
        let mut x = feeds[&io.core_state_input].clone();
        let mut x0 = None;
        for i in 0..copies {
            let t_i = Tensor::new(vec![1, 1], vec![times[i]]).unwrap();
            let step_feeds = BTreeMap::from([
                (io.core_state_input.clone(), x.clone()),
                (io.core_context_input.clone(), c_mod.clone()),
                (io.core_time_input.clone(), t_i),
            ]);
            let out = interpret(&modules.core, &step_feeds)?;
            let pred = out[&io.core_output].clone();
            if i + 1 < copies {
                let (t_s, t_t) = (times[i], times[i + 1]);
                let (_, sigma_s, lambda_s) = cfg.schedule.alpha_sigma_lambda(t_s)?;
                let (alpha_t, sigma_t, lambda_t) = cfg.schedule.alpha_sigma_lambda(t_t)?;
                let h = lambda_t - lambda_s;
                let sr = sigma_t / sigma_s;
                let dw = alpha_t * -f64::exp_m1(-h);
                let data: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(pred.data())
                    .map(|(&xs, &p)| sr * xs + dw * p)
                    .collect();
                x = Tensor::new(x.shape().to_vec(), data).unwrap();
            }
            x0 = Some(pred);
        }
        let x0_last = x0.expect("copies >= 2");
        // the monolithic trajectory output is the graph output that the
        // head does not produce
        let mono_traj_out = mono
            .outputs
            .iter()
            .find(|o| **o != io.head_output)
            .ok_or_else(|| {
                GraphError::Validation("monolithic graph has no trajectory output".into())
            })?;
        let mut trial_e2e = max_err(&x0_last, &mono_vals[mono_traj_out])?;

        let mut head_feeds = BTreeMap::new();
        for name in &io.head_inputs {
            if name == &io.encoder_output {
                head_feeds.insert(name.clone(), c_mod.clone());
            } else {
                head_feeds.insert(name.clone(), x0_last.clone());
            }
        }
        let y = interpret(&modules.head, &head_feeds)?;
        trial_e2e = trial_e2e.max(max_err(&y[&io.head_output], &mono_vals[&io.head_output])?);
        e2e_err = e2e_err.max(trial_e2e);
    }

    let pass = enc_err < cfg.per_module_threshold
        && core_err < cfg.per_module_threshold
        && head_err < cfg.per_module_threshold
        && e2e_err < cfg.end_to_end_threshold;
    Ok(EquivalenceReport {
        trials: trials.max(1),
        n_steps,
        encoder_max_abs_err: enc_err,
        core_max_abs_err: core_err,
        head_max_abs_err: head_err,
        end_to_end_max_abs_err: e2e_err,
        physical_bound_m: e2e_err * cfg.sigma_norm_m,
        per_module_threshold: cfg.per_module_threshold,
        end_to_end_threshold: cfg.end_to_end_threshold,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::extract::extract_modules;
    use crate::graph::fixture::{generate_unrolled_fixture, FixtureSpec};

    #[test]
    fn small_fixture_composition_matches_monolith() {
        let spec = FixtureSpec {
            n_copies: 4,
            encoder_size: 6,
            core_size: 8,
            ..FixtureSpec::default()
        };
        let g = generate_unrolled_fixture(&spec).unwrap();
        let m = extract_modules(&g).unwrap();
        let report = validate_equivalence(&g, &m, 3, 5, &ValidateConfig::default()).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.encoder_max_abs_err < 1e-5);
        assert!(report.core_max_abs_err < 1e-5);
        assert!(report.head_max_abs_err < 1e-5);
        assert!(report.end_to_end_max_abs_err < 1e-4);
    }

    #[test]
    fn step_count_must_match_unroll_depth() {
        let spec = FixtureSpec {
            n_copies: 3,
            encoder_size: 2,
            core_size: 8,
            ..FixtureSpec::default()
        };
        let g = generate_unrolled_fixture(&spec).unwrap();
        let m = extract_modules(&g).unwrap();
        assert!(validate_equivalence(&g, &m, 5, 2, &ValidateConfig::default()).is_err());
    }
}
