//! Exact noise prediction for isotropic Gaussian-mixture data.
//!
//! Under the forward process, component `c` with mean `mu_c` and variance
//! `s2_c` diffuses to `N(sqrt(abar) mu_c, abar s2_c + 1 - abar)`, so the
//! optimal predictor is `eps* = -sqrt(1 - abar) grad log q_t(x_t)`.

use crate::diffusion::{DenoiserOutput, NoiseSchedule};
use crate::error::{Error, Result};

use super::Denoiser;

#[derive(Clone, Debug, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrior {
    components: Vec<GmmComponent>,
    dim: usize,
}

impl GmmPrior {
    /// Weights are renormalised to sum to one.
    pub fn new(mut components: Vec<GmmComponent>) -> Result<Self> {
        let dim = components.first().map(|c| c.mean.len()).ok_or_else(|| Error::param("mixture needs a component"))?;
        if dim == 0 {
            return Err(Error::param("mixture dimension must be >= 1"));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::shape("mixture components differ in dimension"));
            }
            if !(c.weight >= 0.0) || !(c.variance > 0.0) {
                return Err(Error::param("component weights must be >= 0 and variances > 0"));
            }
        }
        if !(total > 0.0) {
            return Err(Error::param("mixture weights sum to zero"));
        }
        components.iter_mut().for_each(|c| c.weight /= total);
        Ok(Self { components, dim })
    }

    pub fn gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(vec![GmmComponent { weight: 1.0, mean, variance }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    /// Mixture mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            m.iter_mut().zip(&c.mean).for_each(|(a, b)| *a += c.weight * b);
        }
        m
    }

    /// Log-density of the diffused marginal at `x`.
    pub fn log_density(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> f64 {
        let (logs, _) = self.component_terms(x, t, sched);
        log_sum_exp(&logs)
    }

    /// Per-component log joint terms and diffused variances.
    fn component_terms(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> (Vec<f64>, Vec<f64>) {
        let ab = sched.alpha_bar(t);
        let sab = ab.sqrt();
        let d = self.dim as f64;
        let mut logs = Vec::with_capacity(self.components.len());
        let mut vars = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let s = ab * c.variance + 1.0 - ab;
            let dist2: f64 = x.iter().zip(&c.mean).map(|(xi, mi)| (xi - sab * mi).powi(2)).sum();
            let lw = if c.weight > 0.0 { c.weight.ln() } else { f64::NEG_INFINITY };
            logs.push(lw - 0.5 * d * (std::f64::consts::TAU * s).ln() - 0.5 * dist2 / s);
            vars.push(s);
        }
        (logs, vars)
    }

    /// Responsibilities and per-component scores `g_c = (m_c - x) / s_c`.
    fn responsibilities(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (logs, vars) = self.component_terms(x, t, sched);
        let lse = log_sum_exp(&logs);
        let resp: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
        let sab = sched.alpha_bar(t).sqrt();
        let scores =
            self.components.iter().zip(&vars).map(|(c, &s)| x.iter().zip(&c.mean).map(|(xi, mi)| (sab * mi - xi) / s).collect()).collect();
        (resp, scores)
    }

    /// Score `grad log q_t(x)`.
    pub fn score(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
        let (resp, scores) = self.responsibilities(x, t, sched);
        let mut g = vec![0.0; self.dim];
        for (r, gc) in resp.iter().zip(&scores) {
            g.iter_mut().zip(gc).for_each(|(a, b)| *a += r * b);
        }
        g
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact `eps_hat` for the mixture; `v` is zero.
pub fn gmm_eps(x_t: &[f64], t: usize, prior: &GmmPrior, sched: &NoiseSchedule) -> Result<DenoiserOutput> {
    sched.check_t(t)?;
    if x_t.len() != prior.dim {
        return Err(Error::shape(format!("input has {} values, prior dimension {}", x_t.len(), prior.dim)));
    }
    let k = -(1.0 - sched.alpha_bar(t)).sqrt();
    let eps_hat = prior.score(x_t, t, sched).into_iter().map(|g| k * g).collect();
    Ok(DenoiserOutput { eps_hat, v: vec![0.0; x_t.len()] })
}

/// Analytic denoiser over volumes: one prior shared by all slices, or one
/// prior per slice.
#[derive(Clone, Debug)]
pub struct GmmDenoiser {
    priors: Vec<GmmPrior>,
    sched: NoiseSchedule,
}

impl GmmDenoiser {
    pub fn new(prior: GmmPrior, sched: NoiseSchedule) -> Self {
        Self { priors: vec![prior], sched }
    }

    pub fn per_slice(priors: Vec<GmmPrior>, sched: NoiseSchedule) -> Result<Self> {
        if priors.is_empty() {
            return Err(Error::param("need at least one prior"));
        }
        Ok(Self { priors, sched })
    }

    fn prior(&self, slice: usize) -> &GmmPrior {
        if self.priors.len() == 1 {
            &self.priors[0]
        } else {
            &self.priors[slice.min(self.priors.len() - 1)]
        }
    }
}

impl Denoiser for GmmDenoiser {
    fn predict(&self, x_t: &[f64], t: usize, slice: usize) -> Result<DenoiserOutput> {
        gmm_eps(x_t, t, self.prior(slice), &self.sched)
    }

    /// Uses the closed-form Hessian of the log marginal:
    /// `H = sum_c r_c (-I/s_c + g_c g_c^T) - g g^T`, which is symmetric.
    fn eps_vjp(&self, x_t: &[f64], t: usize, slice: usize, upstream: &[f64]) -> Result<Vec<f64>> {
        let prior = self.prior(slice);
        self.sched.check_t(t)?;
        if x_t.len() != prior.dim || upstream.len() != prior.dim {
            return Err(Error::shape("vjp input dimension mismatch"));
        }
        let ab = self.sched.alpha_bar(t);
        let (resp, scores) = prior.responsibilities(x_t, t, &self.sched);
        let mut g = vec![0.0; prior.dim];
        let mut hu = vec![0.0; prior.dim];
        for ((r, gc), comp) in resp.iter().zip(&scores).zip(&prior.components) {
            let s = ab * comp.variance + 1.0 - ab;
            let gu: f64 = gc.iter().zip(upstream).map(|(a, b)| a * b).sum();
            for i in 0..prior.dim {
                g[i] += r * gc[i];
                hu[i] += r * (-upstream[i] / s + gc[i] * gu);
            }
        }
        let gu: f64 = g.iter().zip(upstream).map(|(a, b)| a * b).sum();
        let k = -(1.0 - ab).sqrt();
        Ok(hu.iter().zip(&g).map(|(h, gi)| k * (h - gi * gu)).collect())
    }
}
