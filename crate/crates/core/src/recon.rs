//! Classic reconstruction: MLEM, the Poisson log-likelihood and z-axis
//! total variation solvers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sysmat::SystemMatrix;
use crate::volume::{ImageVolume, ProjectionData};

/// ADMM penalty used by every z-TV solve.
pub const ADMM_RHO: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MlemState {
    pub current: ImageVolume,
    pub iteration: usize,
    pub sensitivity: ImageVolume,
}

impl MlemState {
    /// Starts from `init`, or from a uniform image whose projection carries
    /// the measured total when `init` is `None`. Voxels the scanner cannot
    /// see are held at zero.
    pub fn new(s: &SystemMatrix, y: &ProjectionData, init: Option<&ImageVolume>) -> Result<Self> {
        s.check_projection(y)?;
        let sensitivity = s.sensitivity();
        let current = match init {
            Some(x) => {
                s.check_volume(x)?;
                if x.data.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::Precondition("MLEM start must be nonnegative".into()));
                }
                let mut c = x.clone();
                for (v, &sj) in c.data.iter_mut().zip(&sensitivity.data) {
                    if sj <= 0.0 {
                        *v = 0.0;
                    }
                }
                c
            }
            None => {
                let level = (y.sum() / sensitivity.sum()).max(f64::MIN_POSITIVE);
                sensitivity.map(|sj| if sj > 0.0 { level } else { 0.0 })
            }
        };
        Ok(Self { current, iteration: 0, sensitivity })
    }
}

/// One multiplicative EM update. Bins with zero expectation contribute no
/// ratio.
pub fn mlem_update(state: &MlemState, y: &ProjectionData, s: &SystemMatrix) -> Result<MlemState> {
    s.check_projection(y)?;
    s.check_volume(&state.current)?;
    if y.data.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Precondition("MLEM needs nonnegative measurements".into()));
    }
    let mut lambda = vec![0.0; s.n_rows()];
    s.forward_into(&state.current.data, &mut lambda);
    let ratio: Vec<f64> = lambda.iter().zip(&y.data).map(|(&l, &yk)| if l > 0.0 && yk > 0.0 { yk / l } else { 0.0 }).collect();
    let mut back = vec![0.0; s.n_cols()];
    s.back_into(&ratio, &mut back);
    let mut next = state.current.clone();
    next.data.iter_mut().zip(&back).zip(&state.sensitivity.data).for_each(|((v, &b), &sj)| *v = if sj > 0.0 { *v * b / sj } else { 0.0 });
    Ok(MlemState { current: next, iteration: state.iteration + 1, sensitivity: state.sensitivity.clone() })
}

/// `n_iter` MLEM updates, no post-filtering.
pub fn mlem_reconstruct(s: &SystemMatrix, y: &ProjectionData, n_iter: usize, init: Option<&ImageVolume>) -> Result<ImageVolume> {
    if n_iter == 0 {
        return Err(Error::param("MLEM needs at least one iteration"));
    }
    let mut state = MlemState::new(s, y, init)?;
    for _ in 0..n_iter {
        state = mlem_update(&state, y, s)?;
    }
    Ok(state.current)
}

/// `sum_k y log(lambda) - lambda` without the `log y!` constant. Returns
/// negative infinity when a bin has counts but zero expectation.
pub fn poisson_loglik(s: &SystemMatrix, x: &ImageVolume, y: &ProjectionData) -> Result<f64> {
    s.check_projection(y)?;
    if x.data.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Precondition("likelihood needs a nonnegative image".into()));
    }
    let lambda = s.forward_project(x)?;
    let mut total = 0.0;
    for (&l, &yk) in lambda.data.iter().zip(&y.data) {
        if yk > 0.0 {
            if l <= 0.0 {
                return Ok(f64::NEG_INFINITY);
            }
            total += yk * l.ln();
        }
        total -= l;
    }
    Ok(total)
}

/// `sum |x(i,j,k+1) - x(i,j,k)|`.
pub fn tv_z(x: &ImageVolume) -> Result<f64> {
    let [nx, ny, nz] = x.dims();
    if nz < 2 {
        return Err(Error::shape(format!("z-TV needs at least 2 slices, got {nz}")));
    }
    let plane = nx * ny;
    Ok((0..plane).map(|c| (0..nz - 1).map(|k| (x.data[c + (k + 1) * plane] - x.data[c + k * plane]).abs()).sum::<f64>()).sum())
}

fn column_tv(u: &[f64]) -> f64 {
    u.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// LU factors of the tridiagonal `I + rho * D^T D` for one column length.
struct Tridiag {
    /// Modified super-diagonal and inverse pivots of the Thomas sweep.
    c_prime: Vec<f64>,
    inv_pivot: Vec<f64>,
    rho: f64,
}

impl Tridiag {
    fn new(n: usize, rho: f64) -> Self {
        let diag = |i: usize| {
            if n == 1 {
                1.0
            } else if i == 0 || i == n - 1 {
                1.0 + rho
            } else {
                1.0 + 2.0 * rho
            }
        };
        let off = -rho;
        let mut c_prime = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev_c = 0.0;
        for i in 0..n {
            let pivot = diag(i) - if i > 0 { off * prev_c } else { 0.0 };
            inv_pivot[i] = 1.0 / pivot;
            prev_c = if i + 1 < n { off / pivot } else { 0.0 };
            c_prime[i] = prev_c;
        }
        Self { c_prime, inv_pivot, rho }
    }

    fn solve(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        let off = -self.rho;
        for i in 0..n {
            let prev = if i > 0 { rhs[i - 1] } else { 0.0 };
            rhs[i] = (rhs[i] - off * prev) * self.inv_pivot[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            rhs[i] -= self.c_prime[i] * rhs[i + 1];
        }
    }
}

/// ADMM for `argmin_u 1/2 |u - v|^2 + weight |D u|_1` on one column.
///
/// The returned point is the best iterate by objective among the ADMM
/// iterates and the admissible `candidates`, which always include `v`
/// itself, so the result never has a larger objective than `v`.
fn prox_column(v: &[f64], weight: f64, n_inner: usize, tri: &Tridiag, fallback: Option<&[f64]>) -> Vec<f64> {
    let n = v.len();
    let objective = |u: &[f64]| 0.5 * sq_dist(u, v) + weight * column_tv(u);
    let v_norm2: f64 = v.iter().map(|a| a * a).sum();
    let mut best = v.to_vec();
    let mut best_obj = objective(v);
    if let Some(f) = fallback {
        let fo = objective(f);
        if fo < best_obj {
            best = f.to_vec();
            best_obj = fo;
        }
    }
    if n < 2 || weight <= 0.0 {
        return best;
    }
    let rho = tri.rho;
    let thresh = weight / rho;
    let mut u = v.to_vec();
    let mut z: Vec<f64> = u.windows(2).map(|w| w[1] - w[0]).collect();
    let mut s = vec![0.0; n - 1];
    let mut rhs = vec![0.0; n];
    for _ in 0..n_inner {
        // rhs = v + rho * D^T (z - s)
        for i in 0..n {
            let right = if i < n - 1 { z[i] - s[i] } else { 0.0 };
            let left = if i > 0 { z[i - 1] - s[i - 1] } else { 0.0 };
            rhs[i] = v[i] + rho * (left - right);
        }
        tri.solve(&mut rhs);
        u.copy_from_slice(&rhs);
        for i in 0..n - 1 {
            let du = u[i + 1] - u[i];
            let a = du + s[i];
            z[i] = a.signum() * (a.abs() - thresh).max(0.0);
            s[i] += du - z[i];
        }
        let obj = objective(&u);
        if obj < best_obj && sq_dist(&u, v) <= v_norm2 {
            best_obj = obj;
            best.copy_from_slice(&u);
        }
    }
    best
}

fn prox_volume(x: &ImageVolume, weight: f64, n_inner: usize, fallback: Option<&ImageVolume>) -> Result<ImageVolume> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::param(format!("TV weight must be finite and >= 0, got {weight}")));
    }
    if let Some(f) = fallback {
        x.check_same_shape(f)?;
    }
    let [nx, ny, nz] = x.dims();
    let plane = nx * ny;
    let tri = Tridiag::new(nz, ADMM_RHO);
    let columns: Vec<Vec<f64>> = (0..plane)
        .into_par_iter()
        .map(|c| {
            let col: Vec<f64> = (0..nz).map(|k| x.data[c + k * plane]).collect();
            let fb: Option<Vec<f64>> = fallback.map(|f| (0..nz).map(|k| f.data[c + k * plane]).collect());
            prox_column(&col, weight, n_inner, &tri, fb.as_deref())
        })
        .collect();
    let mut out = x.clone();
    for (c, col) in columns.iter().enumerate() {
        for (k, &v) in col.iter().enumerate() {
            out.data[c + k * plane] = v;
        }
    }
    Ok(out)
}

/// Approximate proximal map of `weight * tv_z` by `n_inner` ADMM iterations
/// per (x, y) column. Never increases `tv_z` and never moves farther from
/// `x` than `|x|`.
pub fn tv_z_prox(x: &ImageVolume, weight: f64, n_inner: usize) -> Result<ImageVolume> {
    prox_volume(x, weight, n_inner, None)
}

#[derive(Clone, Debug)]
pub struct AdmmTvOptions {
    pub tv_weight: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    /// Objective value after each outer iteration is appended here when set.
    pub record_objective: bool,
}

impl Default for AdmmTvOptions {
    fn default() -> Self {
        Self { tv_weight: 0.0, n_outer: 100, n_inner: 50, record_objective: false }
    }
}

#[derive(Clone, Debug)]
pub struct AdmmTvResult {
    pub image: ImageVolume,
    pub objective: Vec<f64>,
}

/// Least-squares objective `1/2 |y - S x|^2 + weight * tv_z(x)`.
pub fn tv_ls_objective(s: &SystemMatrix, y: &ProjectionData, x: &ImageVolume, weight: f64) -> Result<f64> {
    let r = s.forward_project(x)?;
    let data: f64 = r.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum();
    let tv = if x.dims()[2] >= 2 { tv_z(x)? } else { 0.0 };
    Ok(0.5 * data + weight * tv)
}

/// Largest eigenvalue of `S^T S` by power iteration.
pub fn lipschitz_constant(s: &SystemMatrix, iters: usize) -> f64 {
    let mut v = vec![1.0 / (s.n_cols() as f64).sqrt(); s.n_cols()];
    let mut sv = vec![0.0; s.n_rows()];
    let mut w = vec![0.0; s.n_cols()];
    let mut est = 0.0;
    for _ in 0..iters {
        s.forward_into(&v, &mut sv);
        s.back_into(&sv, &mut w);
        let n = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        est = n;
        v.iter_mut().zip(&w).for_each(|(a, b)| *a = b / n);
    }
    est
}

/// Regularised least squares by forward-backward splitting: a gradient
/// step on the data term followed by the z-TV proximal map. The step is
/// `1/L` with a 1% margin on the power-iteration estimate of `L`, and each
/// prox keeps the current iterate as a candidate, so the objective never
/// increases.
pub fn admm_tv_reconstruct(s: &SystemMatrix, y: &ProjectionData, opts: &AdmmTvOptions) -> Result<AdmmTvResult> {
    s.check_projection(y)?;
    if opts.n_outer == 0 {
        return Err(Error::param("need at least one outer iteration"));
    }
    let lip = 1.01 * lipschitz_constant(s, 100);
    if !(lip > 0.0) {
        return Err(Error::Degenerate("system matrix has zero norm".into()));
    }
    let step = 1.0 / lip;
    let mut x = ImageVolume::zeros(s.grid());
    let mut objective = Vec::new();
    let mut resid = vec![0.0; s.n_rows()];
    let mut grad = vec![0.0; s.n_cols()];
    for _ in 0..opts.n_outer {
        s.forward_into(&x.data, &mut resid);
        resid.iter_mut().zip(&y.data).for_each(|(r, &yk)| *r -= yk);
        s.back_into(&resid, &mut grad);
        let mut v = x.clone();
        v.data.iter_mut().zip(&grad).for_each(|(a, g)| *a -= step * g);
        x = if opts.tv_weight > 0.0 && x.dims()[2] >= 2 { prox_volume(&v, step * opts.tv_weight, opts.n_inner, Some(&x))? } else { v };
        if opts.record_objective {
            objective.push(tv_ls_objective(s, y, &x, opts.tv_weight)?);
        }
    }
    Ok(AdmmTvResult { image: x, objective })
}
