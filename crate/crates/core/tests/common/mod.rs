//! Shared test oracles, independent of the solver implementation.
//!
//! For the Gaussian denoiser `x0 ~ N(mean, diag(v))` the probability-flow
//! ODE is affine and has the closed-form solution
//!
//! ```text
//! x(t) = alpha(t) mean + C sqrt(alpha(t)^2 v + sigma(t)^2)
//! C    = (x(t0) - alpha(t0) mean) / sqrt(alpha(t0)^2 v + sigma(t0)^2)
//! ```
//!
//! per element. `rk4_ode_solution` integrates the same ODE numerically in
//! logSNR space (`d(x/sigma)/dlambda = e^lambda x0_hat`) as an independent
//! cross-check of the closed form.

use diffsolve_core::schedule::VpSchedule;
use diffsolve_core::tensor::Tensor;

/// Closed-form probability-flow ODE solution for Gaussian data.
pub fn exact_ode_solution(
    sched: &VpSchedule,
    t_from: f64,
    t_to: f64,
    x_from: &Tensor,
    mean: &Tensor,
    variance: &Tensor,
) -> Tensor {
    let (a0, s0, _) = sched.alpha_sigma_lambda(t_from).unwrap();
    let (ae, se, _) = sched.alpha_sigma_lambda(t_to).unwrap();
    let data: Vec<f64> = x_from
        .data()
        .iter()
        .zip(mean.data())
        .zip(variance.data())
        .map(|((&x, &mu), &v)| {
            let c = (x - a0 * mu) / (a0 * a0 * v + s0 * s0).sqrt();
            ae * mu + c * (ae * ae * v + se * se).sqrt()
        })
        .collect();
    Tensor::new(x_from.shape().to_vec(), data).unwrap()
}

/// Dense fourth-order Runge-Kutta integration of the same ODE, verifying
/// the closed form through an entirely different route.
#[allow(dead_code)]
pub fn rk4_ode_solution(
    sched: &VpSchedule,
    t_from: f64,
    t_to: f64,
    x_from: &Tensor,
    mean: &Tensor,
    variance: &Tensor,
    n_steps: usize,
) -> Tensor {
    let (_, s0, l0) = sched.alpha_sigma_lambda(t_from).unwrap();
    let (_, se, l1) = sched.alpha_sigma_lambda(t_to).unwrap();
    // u = x / sigma;  du/dlambda = a(lambda) u + b(lambda) with
    //   a = v e^{2 lambda} / (1 + v e^{2 lambda})
    //   b = mu e^{lambda} / (1 + v e^{2 lambda})
    let n = x_from.len();
    let mut u: Vec<f64> = x_from.data().iter().map(|&x| x / s0).collect();
    let h = (l1 - l0) / n_steps as f64;
    let f = |lam: f64, u: &[f64], out: &mut [f64]| {
        let e2 = (2.0 * lam).exp();
        let e1 = lam.exp();
        for i in 0..n {
            let v = variance.data()[i];
            let denom = 1.0 + v * e2;
            out[i] = (v * e2 / denom) * u[i] + mean.data()[i] * e1 / denom;
        }
    };
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for step in 0..n_steps {
        let lam = l0 + step as f64 * h;
        f(lam, &u, &mut k1);
        for i in 0..n {
            tmp[i] = u[i] + 0.5 * h * k1[i];
        }
        f(lam + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = u[i] + 0.5 * h * k2[i];
        }
        f(lam + 0.5 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = u[i] + h * k3[i];
        }
        f(lam + h, &tmp, &mut k4);
        for i in 0..n {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let data: Vec<f64> = u.iter().map(|&ui| ui * se).collect();
    Tensor::new(x_from.shape().to_vec(), data).unwrap()
}
