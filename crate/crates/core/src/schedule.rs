//! Variance-preserving noise schedule and logSNR-uniform timestep grids.
//!
//! The schedule parameterizes signal and noise magnitudes on continuous time
//! `t in [0, 1]`:
//!
//! ```text
//! log alpha(t) = -t^2 (beta1 - beta0) / 4 - t beta0 / 2
//! sigma(t)     = sqrt(1 - alpha(t)^2)
//! lambda(t)    = log(alpha(t) / sigma(t))
//! ```
//!
//! `lambda` decreases monotonically from clean data (`t ~ 0`) to near-pure
//! noise (`t ~ 1`). Solvers step on grids that are uniform in `lambda`, which
//! concentrates steps in the high-noise region. All math is f64.

use thiserror::Error;

/// Times below this are outside the invertible lambda band.
pub const MIN_SUPPORTED_TIME: f64 = 1e-9;

pub const DEFAULT_BETA0: f64 = 0.1;
pub const DEFAULT_BETA1: f64 = 20.0;
pub const DEFAULT_T_START: f64 = 1.0;
pub const DEFAULT_T_END: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("betas must satisfy beta1 > beta0 > 0, got beta0={beta0}, beta1={beta1}")]
    InvalidBetas { beta0: f64, beta1: f64 },
    #[error("time {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },
    #[error("lambda is singular at t = 0 (sigma vanishes)")]
    LambdaSingular,
    #[error("lambda {lam} outside the representable band [{min}, {max}]")]
    LambdaOutOfBand { lam: f64, min: f64, max: f64 },
    #[error("invalid grid arguments: {0}")]
    InvalidGrid(String),
}

/// The (beta0, beta1) variance-preserving schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpSchedule {
    beta0: f64,
    beta1: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self {
            beta0: DEFAULT_BETA0,
            beta1: DEFAULT_BETA1,
        }
    }
}

impl VpSchedule {
    pub fn new(beta0: f64, beta1: f64) -> Result<Self, ScheduleError> {
        if !(beta0 > 0.0 && beta1 > beta0) || !beta0.is_finite() || !beta1.is_finite() {
            return Err(ScheduleError::InvalidBetas { beta0, beta1 });
        }
        Ok(Self { beta0, beta1 })
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    /// `log alpha(t) = -t^2 (beta1 - beta0) / 4 - t beta0 / 2`.
    pub fn log_alpha(&self, t: f64) -> Result<f64, ScheduleError> {
        if !(0.0..=1.0).contains(&t) {
            return Err(ScheduleError::TimeOutOfRange { t });
        }
        Ok(self.log_alpha_unchecked(t))
    }

    fn log_alpha_unchecked(&self, t: f64) -> f64 {
        -0.25 * t * t * (self.beta1 - self.beta0) - 0.5 * t * self.beta0
    }

    pub fn alpha(&self, t: f64) -> Result<f64, ScheduleError> {
        Ok(self.log_alpha(t)?.exp())
    }

    pub fn sigma(&self, t: f64) -> Result<f64, ScheduleError> {
        let la = self.log_alpha(t)?;
        Ok((-f64::exp_m1(2.0 * la)).sqrt())
    }

    /// `(alpha, sigma, lambda)` at `t`. Errors at `t = 0` where lambda is
    /// infinite; use [`Self::alpha`] / [`Self::sigma`] there instead.
    pub fn alpha_sigma_lambda(&self, t: f64) -> Result<(f64, f64, f64), ScheduleError> {
        let la = self.log_alpha(t)?;
        if t == 0.0 {
            return Err(ScheduleError::LambdaSingular);
        }
        // sigma^2 = 1 - alpha^2 via expm1 keeps precision as alpha -> 1
        let sigma2 = -f64::exp_m1(2.0 * la);
        Ok((la.exp(), sigma2.sqrt(), la - 0.5 * sigma2.ln()))
    }

    pub fn lambda(&self, t: f64) -> Result<f64, ScheduleError> {
        Ok(self.alpha_sigma_lambda(t)?.2)
    }

    /// Invert `lambda(t) = lam` in closed form.
    ///
    /// From `lam`, `log alpha = -softplus(-2 lam) / 2`; the quadratic in `t`
    /// is then solved with the cancellation-free root
    /// `t = -2 log_alpha / (beta0/2 + sqrt(beta0^2/4 - (beta1-beta0) log_alpha))`.
    pub fn inverse_lambda(&self, lam: f64) -> Result<f64, ScheduleError> {
        let min = self.lambda(1.0).expect("lambda(1) is finite");
        let max = self
            .lambda(MIN_SUPPORTED_TIME)
            .expect("lambda(t_min) is finite");
        if !lam.is_finite() || lam < min - 1e-9 || lam > max {
            return Err(ScheduleError::LambdaOutOfBand { lam, min, max });
        }
        let x = -2.0 * lam;
        let softplus = x.max(0.0) + f64::ln_1p((-x.abs()).exp());
        let log_alpha = -0.5 * softplus;
        let half_beta0 = 0.5 * self.beta0;
        let disc = half_beta0 * half_beta0 - (self.beta1 - self.beta0) * log_alpha;
        let t = -2.0 * log_alpha / (half_beta0 + disc.sqrt());
        Ok(t.min(1.0))
    }
}

/// N+1 strictly decreasing continuous timesteps whose lambda values are
/// uniformly spaced.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepGrid {
    timesteps: Vec<f64>,
}

impl TimestepGrid {
    /// Build the logSNR-uniform grid of `n_steps + 1` times from `t_start`
    /// down to `t_end`; endpoints are exact.
    pub fn log_snr_uniform(
        sched: &VpSchedule,
        n_steps: usize,
        t_start: f64,
        t_end: f64,
    ) -> Result<Self, ScheduleError> {
        if n_steps == 0 {
            return Err(ScheduleError::InvalidGrid("n_steps must be >= 1".into()));
        }
        if !(t_end > 0.0 && t_end < t_start && t_start <= 1.0) {
            return Err(ScheduleError::InvalidGrid(format!(
                "need 0 < t_end < t_start <= 1, got t_start={t_start}, t_end={t_end}"
            )));
        }
        let lam_start = sched.lambda(t_start)?;
        let lam_end = sched.lambda(t_end)?;
        let mut timesteps = Vec::with_capacity(n_steps + 1);
        timesteps.push(t_start);
        for i in 1..n_steps {
            let frac = i as f64 / n_steps as f64;
            let lam = lam_start + frac * (lam_end - lam_start);
            timesteps.push(sched.inverse_lambda(lam)?);
        }
        timesteps.push(t_end);
        Ok(Self { timesteps })
    }

    /// Grid made of explicit timesteps; must be strictly decreasing within
    /// (0, 1]. Used for truncated-schedule experiments, where the result is
    /// intentionally not logSNR-uniform down to t_end.
    pub fn from_timesteps(timesteps: Vec<f64>) -> Result<Self, ScheduleError> {
        if timesteps.len() < 2 {
            return Err(ScheduleError::InvalidGrid(
                "grid needs at least 2 timesteps".into(),
            ));
        }
        for w in timesteps.windows(2) {
            // negated so NaN timesteps are rejected too
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(w[1] < w[0]) {
                return Err(ScheduleError::InvalidGrid(format!(
                    "timesteps not strictly decreasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        let (first, last) = (timesteps[0], timesteps[timesteps.len() - 1]);
        if !(last > 0.0 && first <= 1.0) {
            return Err(ScheduleError::InvalidGrid(format!(
                "timesteps must lie in (0, 1], got [{first}, {last}]"
            )));
        }
        Ok(Self { timesteps })
    }

    /// First `n_steps + 1` entries of this grid as a new (truncated) grid.
    pub fn truncate(&self, n_steps: usize) -> Result<Self, ScheduleError> {
        if n_steps == 0 || n_steps > self.n_steps() {
            return Err(ScheduleError::InvalidGrid(format!(
                "cannot truncate {}-step grid to {} steps",
                self.n_steps(),
                n_steps
            )));
        }
        Ok(Self {
            timesteps: self.timesteps[..=n_steps].to_vec(),
        })
    }

    /// Number of solver updates (one less than the number of timesteps).
    pub fn n_steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.timesteps
    }

    pub fn t_start(&self) -> f64 {
        self.timesteps[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.timesteps.last().unwrap()
    }
}
