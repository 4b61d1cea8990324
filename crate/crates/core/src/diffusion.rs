//! DDPM / DDIM algebra on flat `f64` buffers.
//!
//! Time indices run `1..=T`; index 0 is the clean-data boundary with
//! `alpha_bar[0] = 1`.

use crate::error::{Error, Result};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Weight of the variational-bound term in the hybrid training loss.
pub const LAMBDA_VLB: f64 = 1e-3;

/// Linear beta schedule and its derived tables. With the defaults
/// `alpha_bar[T] < 1e-4`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    beta_range: (f64, f64),
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(Error::param(format!("schedule needs T >= 2, got {t_max}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::param(format!("need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")));
    }
    let mut beta = vec![0.0; t_max + 1];
    let mut alpha = vec![1.0; t_max + 1];
    let mut alpha_bar = vec![1.0; t_max + 1];
    let mut beta_tilde = vec![0.0; t_max + 1];
    for t in 1..=t_max {
        beta[t] = beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_max - 1) as f64;
        alpha[t] = 1.0 - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        beta_tilde[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
    }
    Ok(NoiseSchedule { t_max, beta_range: (beta_start, beta_end), beta, alpha, alpha_bar, beta_tilde })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// `(beta_start, beta_end)` the schedule was built from.
    pub fn beta_range(&self) -> (f64, f64) {
        self.beta_range
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `beta_tilde(1) = 0`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(Error::param(format!("timestep {t} outside 1..={}", self.t_max)));
        }
        Ok(())
    }
}

/// `x_t = sqrt(abar) x0 + sqrt(1 - abar) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    same_len(x0, eps)?;
    let (a, b) = (sched.alpha_bar(t).sqrt(), (1.0 - sched.alpha_bar(t)).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Inverse of [`q_sample`] for a given noise estimate.
pub fn predict_x0(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    same_len(x_t, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let (inv, b) = (1.0 / ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| (x - b * e) * inv).collect())
}

/// Mean of the forward posterior `q(x_{t-1} | x_t, x0)`.
pub fn posterior_mean(x_t: &[f64], x0: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    same_len(x_t, x0)?;
    let (a, ab, ab_prev) = (sched.alpha(t), sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let cx = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let c0 = ab_prev.sqrt() * (1.0 - a) / (1.0 - ab);
    Ok(x_t.iter().zip(x0).map(|(x, z)| cx * x + c0 * z).collect())
}

/// Model mean from a noise estimate.
pub fn mu_theta(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    same_len(x_t, eps_hat)?;
    let (a, ab) = (sched.alpha(t), sched.alpha_bar(t));
    let k = (1.0 - a) / (1.0 - ab).sqrt();
    let inv = 1.0 / a.sqrt();
    Ok(x_t.iter().zip(eps_hat).map(|(x, e)| inv * (x - k * e)).collect())
}

/// Log-variance interpolated between `beta_tilde` (v = 0) and `beta`
/// (v = 1). Only defined for `t >= 2`.
fn log_sigma2(v: f64, t: usize, sched: &NoiseSchedule) -> f64 {
    v * sched.beta(t).ln() + (1.0 - v) * sched.beta_tilde(t).ln()
}

/// Reverse-step standard deviation; zero at `t = 1`. `v` is clamped into
/// `[0, 1]`.
pub fn sigma_theta(v: f64, t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_t(t)?;
    if t == 1 {
        return Ok(0.0);
    }
    let vc = v.clamp(0.0, 1.0);
    if vc != v {
        log::debug!("variance coefficient {v} clamped to {vc}");
    }
    Ok((0.5 * log_sigma2(vc, t, sched)).exp())
}

/// Noise prediction `eps_hat` and variance coefficient `v` for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserOutput {
    pub eps_hat: Vec<f64>,
    pub v: Vec<f64>,
}

/// `x_{t-1} = mu_theta + sigma z`, with `z` ignored at `t = 1`.
pub fn ancestral_step(x_t: &[f64], out: &DenoiserOutput, t: usize, z: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len(x_t, z)?;
    same_len(x_t, &out.v)?;
    let mut mean = mu_theta(x_t, &out.eps_hat, t, sched)?;
    if t > 1 {
        for ((m, &zi), &vi) in mean.iter_mut().zip(z).zip(&out.v) {
            *m += sigma_theta(vi, t, sched)? * zi;
        }
    }
    Ok(mean)
}

/// Deterministic (eta = 0) DDIM jump from `t` to `t_prev < t`.
pub fn ddim_step(x_t: &[f64], eps_hat: &[f64], t: usize, t_prev: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t_prev >= t {
        return Err(Error::param(format!("DDIM needs t_prev < t, got {t_prev} >= {t}")));
    }
    let x0 = predict_x0(x_t, eps_hat, t, sched)?;
    Ok(ddim_from_x0(&x0, eps_hat, t_prev, sched))
}

/// Re-noise a clean estimate to level `t_prev` along direction `eps`.
pub fn ddim_from_x0(x0: &[f64], eps: &[f64], t_prev: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let ab = sched.alpha_bar(t_prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Second-order (Heun) version of [`ddim_from_x0`]. In the variables
/// `y = x / sqrt(abar)`, `tau = sqrt((1 - abar) / abar)` a DDIM step is an
/// Euler step of `dy/dtau = eps`; this averages the slopes `eps_t` and
/// `eps_prev`, the latter evaluated at the Euler prediction.
pub fn heun_from_x0(x0: &[f64], eps_t: &[f64], eps_prev: &[f64], t: usize, t_prev: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let tau = |s: usize| ((1.0 - sched.alpha_bar(s)) / sched.alpha_bar(s)).sqrt();
    let (tt, tp) = (tau(t), tau(t_prev));
    let a = sched.alpha_bar(t_prev).sqrt();
    x0.iter().zip(eps_t).zip(eps_prev).map(|((x, e1), e2)| a * (x + tt * e1 + 0.5 * (tp - tt) * (e1 + e2))).collect()
}

/// `n` uniformly spaced timesteps from `T` down to 1, both included.
pub fn ddim_timesteps(t_max: usize, n: usize) -> Result<Vec<usize>> {
    if n < 2 || n > t_max {
        return Err(Error::param(format!("DDIM step count must be in 2..={t_max}, got {n}")));
    }
    Ok((0..n).map(|k| 1 + (((t_max - 1) as f64) * (n - 1 - k) as f64 / (n - 1) as f64).round() as usize).collect())
}

/// Hybrid objective and its gradient with respect to the network outputs.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub loss: f64,
    pub mse: f64,
    pub vlb: f64,
    pub d_eps_hat: Vec<f64>,
    pub d_v: Vec<f64>,
}

/// `mean |eps - eps_hat|^2 + LAMBDA_VLB * KL(q(x_{t-1}|x_t,x0) || p(x_{t-1}|x_t))`.
///
/// The KL term sees the model mean through a stop-gradient, so it only
/// trains `v`. It is zero at `t = 1`, where the reverse step is noiseless.
pub fn hybrid_loss(x0: &[f64], x_t: &[f64], eps: &[f64], out: &DenoiserOutput, t: usize, sched: &NoiseSchedule) -> Result<LossTerms> {
    same_len(x0, eps)?;
    same_len(x0, &out.eps_hat)?;
    same_len(x0, &out.v)?;
    let n = x0.len() as f64;
    let mut mse = 0.0;
    let mut d_eps_hat = Vec::with_capacity(x0.len());
    for (&e, &eh) in eps.iter().zip(&out.eps_hat) {
        mse += (eh - e) * (eh - e);
        d_eps_hat.push(2.0 * (eh - e) / n);
    }
    mse /= n;
    let mut vlb = 0.0;
    let mut d_v = vec![0.0; x0.len()];
    if t > 1 {
        let mu_q = posterior_mean(x_t, x0, t, sched)?;
        let mu_p = mu_theta(x_t, &out.eps_hat, t, sched)?;
        let var_q = sched.beta_tilde(t);
        let (la, lb) = (sched.beta(t).ln(), var_q.ln());
        for i in 0..x0.len() {
            let lp = log_sigma2(out.v[i], t, sched);
            let var_p = lp.exp();
            let delta2 = (mu_q[i] - mu_p[i]).powi(2);
            vlb += 0.5 * (lp - lb + (var_q + delta2) / var_p - 1.0);
            d_v[i] = LAMBDA_VLB * 0.5 * (1.0 - (var_q + delta2) / var_p) * (la - lb) / n;
        }
        vlb /= n;
    }
    let loss = mse + LAMBDA_VLB * vlb;
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss at t={t}: mse={mse}, vlb={vlb}")));
    }
    Ok(LossTerms { loss, mse, vlb, d_eps_hat, d_v })
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("length {} vs {}", a.len(), b.len())));
    }
    Ok(())
}
