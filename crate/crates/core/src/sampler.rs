//! Guided per-slice diffusion reconstruction of a 3D volume.
//!
//! Every DDIM step predicts `x0_hat` for all slices, then applies the
//! volume-level corrections in order: image-domain consistency with the
//! input reconstruction, MLEM blending on every `mlem_every`-th step and
//! z-TV. The trajectory then moves to the next level.
//!
//! The sampler runs in the denoiser's units. [`ValueMap`] converts between
//! activity and those units; MLEM always runs on activity.

use rayon::prelude::*;

use crate::denoiser::Denoiser;
use crate::diffusion::{ddim_from_x0, ddim_timesteps, heun_from_x0, predict_x0, NoiseSchedule};
use crate::error::{Error, Result};
use crate::phantom::CountLevel;
use crate::recon::{mlem_update, poisson_loglik, tv_z, tv_z_prox, MlemState};
use crate::rng::{normal_vec, Purpose};
use crate::sysmat::SystemMatrix;
use crate::volume::{ImageVolume, ProjectionData};

/// `max(0, 0.0698 ln C + 0.3454)`.
pub fn lambda_dps_of(c: f64) -> Result<f64> {
    check_c(c)?;
    Ok((0.0698 * c.ln() + 0.3454).max(0.0))
}

/// `0.1559 exp(-4.8120 C) + 0.0079 exp(3.6508 C)`, clamped to `[0, 1]`.
pub fn lambda_mlem_of(c: f64) -> Result<f64> {
    check_c(c)?;
    Ok((0.1559 * (-4.8120 * c).exp() + 0.0079 * (3.6508 * c).exp()).clamp(0.0, 1.0))
}

fn check_c(c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::param(format!("count level must be in (0,1], got {c}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lambda {
    /// Resolved from the count level.
    Auto,
    Value(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// `d x0_hat / d x_t ~ 1 / sqrt(abar_t)`.
    Approx,
    /// Through the denoiser's vector-Jacobian product.
    Exact,
}

/// Where the consistency, MLEM and TV corrections act.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ordering {
    /// On `x0_hat`, before moving to the next level. The consistency step is
    /// the proximal map of `lambda |x - x_in|^2`.
    Estimate,
    /// On `x_{t-1}` with the explicit gradient step of the DPS update. Stable
    /// only for small `lambda`.
    Latent,
}

/// Integrator for the move from `t` to the next level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Solver {
    /// First-order DDIM (eta = 0).
    Ddim,
    /// DDIM with a second-order correction; two denoiser calls per step.
    Heun,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub lambda_dps: Lambda,
    pub lambda_mlem: Lambda,
    pub count_level: CountLevel,
    pub mlem_every: usize,
    pub mlem_iters: usize,
    pub ddim_steps: usize,
    pub tv_weight: f64,
    pub tv_inner: usize,
    pub dual_noise: bool,
    pub grad_mode: GradMode,
    pub ordering: Ordering,
    pub solver: Solver,
    pub use_dps: bool,
    pub use_mlem: bool,
    pub use_tv: bool,
    /// Start from the noised input; otherwise from independent noise per slice.
    pub xin_start: bool,
    /// Bounds applied to every `x0_hat`, in denoiser units.
    pub clip_x0: Option<(f64, f64)>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda_dps: Lambda::Auto,
            lambda_mlem: Lambda::Auto,
            count_level: CountLevel::new(1.0).expect("1 is a valid count level"),
            mlem_every: 10,
            mlem_iters: 1,
            ddim_steps: 25,
            tv_weight: 0.02,
            tv_inner: 10,
            dual_noise: true,
            grad_mode: GradMode::Approx,
            ordering: Ordering::Estimate,
            solver: Solver::Ddim,
            use_dps: true,
            use_mlem: true,
            use_tv: true,
            xin_start: true,
            clip_x0: None,
        }
    }
}

impl GuidanceConfig {
    /// All corrections off, single trajectory.
    pub fn unguided() -> Self {
        Self { use_dps: false, use_mlem: false, use_tv: false, dual_noise: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mlem_every == 0 {
            return Err(Error::param("mlem_every must be >= 1"));
        }
        if self.ddim_steps < 2 {
            return Err(Error::param("ddim_steps must be >= 2"));
        }
        if !(self.tv_weight >= 0.0) {
            return Err(Error::param("tv_weight must be >= 0"));
        }
        if let Lambda::Value(v) = self.lambda_dps {
            if !(v >= 0.0) {
                return Err(Error::param(format!("lambda_dps must be >= 0, got {v}")));
            }
        }
        if let Lambda::Value(v) = self.lambda_mlem {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::param(format!("lambda_mlem must be in [0,1], got {v}")));
            }
        }
        if let Some((lo, hi)) = self.clip_x0 {
            if !(lo < hi) {
                return Err(Error::param("clip_x0 needs lo < hi"));
            }
        }
        Ok(())
    }

    /// `(lambda_dps, lambda_mlem)` after resolving automatic values.
    pub fn resolved_lambdas(&self) -> Result<(f64, f64)> {
        let c = self.count_level.value();
        let dps = match self.lambda_dps {
            Lambda::Auto => lambda_dps_of(c)?,
            Lambda::Value(v) => v,
        };
        let mlem = match self.lambda_mlem {
            Lambda::Auto => lambda_mlem_of(c)?,
            Lambda::Value(v) => v,
        };
        Ok((dps, mlem))
    }
}

/// Affine map `u = scale * x + offset` from activity to denoiser units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueMap {
    pub scale: f64,
    pub offset: f64,
}

impl ValueMap {
    pub const IDENTITY: ValueMap = ValueMap { scale: 1.0, offset: 0.0 };

    /// `u = 2 x / (kappa m) - 1`, with `m = sum(y) / sum(sensitivity)` the
    /// sensitivity-weighted activity level seen by the scanner.
    pub fn from_counts(s: &SystemMatrix, y: &ProjectionData, kappa: f64) -> Result<Self> {
        s.check_projection(y)?;
        let m = y.sum() / s.sensitivity().sum();
        Self::from_level(m, kappa)
    }

    pub fn from_level(level: f64, kappa: f64) -> Result<Self> {
        if !(level > 0.0 && kappa > 0.0 && level.is_finite()) {
            return Err(Error::Degenerate(format!("cannot normalise by level {level} with kappa {kappa}")));
        }
        Ok(Self { scale: 2.0 / (kappa * level), offset: -1.0 })
    }

    pub fn to_units(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| self.scale * v + self.offset).collect()
    }

    pub fn to_activity(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|v| (v - self.offset) / self.scale).collect()
    }
}

/// Everything one reconstruction needs besides the guidance settings. The
/// anatomy conditioning lives inside `model`.
pub struct SamplerRun<'a> {
    pub x_in: &'a ImageVolume,
    /// Measured data and its system matrix; required for MLEM insertion.
    pub data: Option<(&'a SystemMatrix, &'a ProjectionData)>,
    pub model: &'a dyn Denoiser,
    pub sched: &'a NoiseSchedule,
    pub units: ValueMap,
    pub seed: u64,
}

/// Per-run diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleDiagnostics {
    pub lambda_dps: f64,
    pub lambda_mlem: f64,
    /// `(tv_z before, tv_z after)` for every TV step.
    pub tv_steps: Vec<(f64, f64)>,
    /// `(loglik of x0_hat, loglik of f_mlem, loglik of blend)` per insertion.
    pub mlem_steps: Vec<(f64, f64, f64)>,
}

/// `x_T = sqrt(abar_T) x_in + sqrt(1 - abar_T) eps0` for every slice, with
/// the same 2D `eps0` on all slices.
pub fn init_start(x_in: &ImageVolume, sched: &NoiseSchedule, eps0: &[f64]) -> Result<Vec<f64>> {
    let hw = x_in.grid.slice_len();
    if eps0.len() != hw {
        return Err(Error::shape(format!("start noise has {} values, slice has {hw}", eps0.len())));
    }
    let ab = sched.alpha_bar(sched.t_max());
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_in.data.chunks(hw).flat_map(|s| s.iter().zip(eps0).map(move |(x, e)| a * x + b * e)).collect())
}

/// Gradient source for [`dps_correct`].
pub enum DpsGradient<'a> {
    Approx,
    /// `upstream -> (d eps_hat / d x_t)^T upstream`.
    Exact(&'a dyn Fn(&[f64]) -> Result<Vec<f64>>),
}

/// `grad_{x_t} |x_in - x0_hat|^2 = -2 J^T (x_in - x0_hat)` with
/// `J = (I - sqrt(1 - abar) d eps_hat / d x_t) / sqrt(abar)`.
pub fn dps_gradient(x0_hat: &[f64], x_in: &[f64], t: usize, sched: &NoiseSchedule, grad: &DpsGradient) -> Result<Vec<f64>> {
    sched.check_t(t)?;
    if x0_hat.len() != x_in.len() {
        return Err(Error::shape("x0_hat and x_in differ in length"));
    }
    let ab = sched.alpha_bar(t);
    let r: Vec<f64> = x_in.iter().zip(x0_hat).map(|(a, b)| a - b).collect();
    let jt_r: Vec<f64> = match grad {
        DpsGradient::Approx => r.iter().map(|v| v / ab.sqrt()).collect(),
        DpsGradient::Exact(vjp) => {
            let v = vjp(&r)?;
            if v.len() != r.len() {
                return Err(Error::shape("vjp returned wrong length"));
            }
            r.iter().zip(&v).map(|(ri, vi)| (ri - (1.0 - ab).sqrt() * vi) / ab.sqrt()).collect()
        }
    };
    Ok(jt_r.iter().map(|v| -2.0 * v).collect())
}

/// `x_prev - lambda grad_{x_t} |x_in - x0_hat|^2`.
pub fn dps_correct(
    x_prev: &[f64],
    x0_hat: &[f64],
    x_in: &[f64],
    lambda: f64,
    t: usize,
    sched: &NoiseSchedule,
    grad: &DpsGradient,
) -> Result<Vec<f64>> {
    if x_prev.len() != x0_hat.len() {
        return Err(Error::shape("x_prev and x0_hat differ in length"));
    }
    if lambda == 0.0 {
        return Ok(x_prev.to_vec());
    }
    let g = dps_gradient(x0_hat, x_in, t, sched, grad)?;
    Ok(x_prev.iter().zip(&g).map(|(x, gi)| x - lambda * gi).collect())
}

/// `argmin_x |x - x0_hat|^2 / 2 + lambda |x - x_in|^2`.
pub fn dps_prox(x0_hat: &[f64], x_in: &[f64], lambda: f64) -> Vec<f64> {
    let k = 2.0 * lambda;
    x0_hat.iter().zip(x_in).map(|(a, b)| (a + k * b) / (1.0 + k)).collect()
}

/// `(1 - lambda) x0_hat + lambda f_mlem(x0_hat)` where `f_mlem` is
/// `n_iters` MLEM updates from `x0_hat` clipped to a positive floor.
/// Voxels the scanner does not see keep `x0_hat`.
pub fn mlem_insert(x0_hat: &ImageVolume, y: &ProjectionData, s: &SystemMatrix, lambda: f64, n_iters: usize) -> Result<ImageVolume> {
    Ok(mlem_insert_parts(x0_hat, y, s, lambda, n_iters)?.0)
}

fn mlem_insert_parts(
    x0_hat: &ImageVolume,
    y: &ProjectionData,
    s: &SystemMatrix,
    lambda: f64,
    n_iters: usize,
) -> Result<(ImageVolume, ImageVolume)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("lambda_mlem must be in [0,1], got {lambda}")));
    }
    s.check_volume(x0_hat)?;
    if lambda == 0.0 {
        return Ok((x0_hat.clone(), x0_hat.clone()));
    }
    let peak = x0_hat.data.iter().copied().fold(0.0f64, f64::max);
    let mut state = if peak > 0.0 {
        let floor = 1e-6 * peak;
        MlemState::new(s, y, Some(&x0_hat.map(|v| v.max(floor))))?
    } else {
        MlemState::new(s, y, None)?
    };
    for _ in 0..n_iters {
        state = mlem_update(&state, y, s)?;
    }
    let mut f = state.current;
    for ((fv, &sj), &xv) in f.data.iter_mut().zip(&state.sensitivity.data).zip(&x0_hat.data) {
        if sj <= 0.0 {
            *fv = xv;
        }
    }
    let mut blend = x0_hat.clone();
    blend.data.iter_mut().zip(&f.data).for_each(|(b, fv)| *b = (1.0 - lambda) * *b + lambda * fv);
    Ok((blend, f))
}

/// Reconstructs a volume; see [`sample_volume_diagnostics`].
pub fn sample_volume(run: &SamplerRun, cfg: &GuidanceConfig) -> Result<ImageVolume> {
    Ok(sample_volume_diagnostics(run, cfg)?.0)
}

/// Runs one or two trajectories and averages their final estimates. The
/// result is in activity units and clipped at zero.
pub fn sample_volume_diagnostics(run: &SamplerRun, cfg: &GuidanceConfig) -> Result<(ImageVolume, SampleDiagnostics)> {
    cfg.validate()?;
    let (lambda_dps, lambda_mlem) = cfg.resolved_lambdas()?;
    if cfg.use_mlem && lambda_mlem > 0.0 && run.data.is_none() {
        return Err(Error::Precondition("MLEM insertion needs measured data".into()));
    }
    if let Some((s, y)) = run.data {
        s.check_volume(run.x_in)?;
        s.check_projection(y)?;
    }
    if !run.x_in.is_finite() || run.x_in.data.iter().any(|&v| v < 0.0) {
        return Err(Error::Precondition("x_in must be finite and nonnegative".into()));
    }
    let mut diag = SampleDiagnostics { lambda_dps, lambda_mlem, ..Default::default() };
    let n_traj = if cfg.dual_noise { 2 } else { 1 };
    let mut acc = vec![0.0; run.x_in.len()];
    for k in 0..n_traj {
        let u = trajectory(run, cfg, k as u64, lambda_dps, lambda_mlem, &mut diag)?;
        acc.iter_mut().zip(&u).for_each(|(a, b)| *a += b);
    }
    let mean: Vec<f64> = acc.iter().map(|v| v / n_traj as f64).collect();
    let data = run.units.to_activity(&mean).into_iter().map(|v| v.max(0.0)).collect();
    Ok((ImageVolume::from_vec(&run.x_in.grid, data)?, diag))
}

fn trajectory(
    run: &SamplerRun,
    cfg: &GuidanceConfig,
    traj: u64,
    lambda_dps: f64,
    lambda_mlem: f64,
    diag: &mut SampleDiagnostics,
) -> Result<Vec<f64>> {
    let grid = &run.x_in.grid;
    let (hw, nz) = (grid.slice_len(), grid.dims[2]);
    let sched = run.sched;
    let u_in = run.units.to_units(&run.x_in.data);
    let eps0 = normal_vec(run.seed, Purpose::StartNoise, traj, hw);
    let mut x = if cfg.xin_start {
        let vin = ImageVolume::from_vec(grid, u_in.clone())?;
        init_start(&vin, sched, &eps0)?
    } else {
        (0..nz).flat_map(|z| normal_vec(run.seed, Purpose::StepNoise, traj * nz as u64 + z as u64, hw)).collect()
    };
    let steps = ddim_timesteps(sched.t_max(), cfg.ddim_steps)?;
    for (k, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(k + 1).copied().unwrap_or(0);
        let eps_hat = predict_all(run, &x, t)?;
        let x_t = std::mem::take(&mut x);
        let mut x0 = predict_x0(&x_t, &eps_hat, t, sched)?;
        if let Some((lo, hi)) = cfg.clip_x0 {
            x0.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
        let mut renoise_with_eps0 = false;

        if cfg.use_dps && lambda_dps > 0.0 && cfg.ordering == Ordering::Estimate {
            x0 = dps_prox(&x0, &u_in, lambda_dps);
        }
        if cfg.use_mlem && lambda_mlem > 0.0 && (k + 1) % cfg.mlem_every == 0 {
            let (s, y) = run.data.expect("checked by caller");
            let act = ImageVolume::from_vec(grid, run.units.to_activity(&x0))?;
            let (blend, f) = mlem_insert_parts(&act, y, s, lambda_mlem, cfg.mlem_iters)?;
            let clip = act.map(|v| v.max(0.0));
            diag.mlem_steps.push((
                poisson_loglik(s, &clip, y)?,
                poisson_loglik(s, &f, y)?,
                poisson_loglik(s, &blend.map(|v| v.max(0.0)), y)?,
            ));
            x0 = run.units.to_units(&blend.data);
            renoise_with_eps0 = true;
        }
        if cfg.use_tv && cfg.tv_weight > 0.0 && cfg.ordering == Ordering::Estimate && nz >= 2 {
            x0 = tv_step(grid, x0, cfg, diag)?;
        }

        x = if t_prev == 0 {
            x0.clone()
        } else if renoise_with_eps0 {
            let tiled: Vec<f64> = (0..nz).flat_map(|_| eps0.iter().copied()).collect();
            ddim_from_x0(&x0, &tiled, t_prev, sched)
        } else {
            match cfg.solver {
                Solver::Ddim => ddim_from_x0(&x0, &eps_hat, t_prev, sched),
                Solver::Heun => {
                    let euler = ddim_from_x0(&x0, &eps_hat, t_prev, sched);
                    let eps2 = predict_all(run, &euler, t_prev)?;
                    heun_from_x0(&x0, &eps_hat, &eps2, t, t_prev, sched)
                }
            }
        };

        if cfg.ordering == Ordering::Latent && t_prev > 0 {
            if cfg.use_dps && lambda_dps > 0.0 {
                x = latent_dps(run, cfg, &x, &x0, &x_t, &u_in, t, lambda_dps)?;
            }
            if cfg.use_tv && cfg.tv_weight > 0.0 && nz >= 2 {
                x = tv_step(grid, x, cfg, diag)?;
            }
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value at voxel {bad} after DDIM step {} of {} (t={t}, trajectory {traj})",
                k + 1,
                steps.len()
            )));
        }
    }
    Ok(x)
}

/// Noise predictions for every slice, evaluated concurrently.
fn predict_all(run: &SamplerRun, x: &[f64], t: usize) -> Result<Vec<f64>> {
    let hw = run.x_in.grid.slice_len();
    let preds: Vec<Result<Vec<f64>>> =
        (0..run.x_in.grid.dims[2]).into_par_iter().map(|z| run.model.predict(&x[z * hw..(z + 1) * hw], t, z).map(|o| o.eps_hat)).collect();
    let mut eps = Vec::with_capacity(x.len());
    for p in preds {
        eps.extend(p?);
    }
    Ok(eps)
}

fn tv_step(grid: &crate::volume::VoxelGrid, v: Vec<f64>, cfg: &GuidanceConfig, diag: &mut SampleDiagnostics) -> Result<Vec<f64>> {
    let vol = ImageVolume::from_vec(grid, v)?;
    let before = tv_z(&vol)?;
    let out = tv_z_prox(&vol, cfg.tv_weight, cfg.tv_inner)?;
    diag.tv_steps.push((before, tv_z(&out)?));
    Ok(out.data)
}

#[allow(clippy::too_many_arguments)]
fn latent_dps(
    run: &SamplerRun,
    cfg: &GuidanceConfig,
    x_prev: &[f64],
    x0: &[f64],
    x_t: &[f64],
    u_in: &[f64],
    t: usize,
    lambda: f64,
) -> Result<Vec<f64>> {
    let hw = run.x_in.grid.slice_len();
    let nz = run.x_in.grid.dims[2];
    let parts: Vec<Result<Vec<f64>>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let r = z * hw..(z + 1) * hw;
            let xt = &x_t[r.clone()];
            let vjp = |up: &[f64]| run.model.eps_vjp(xt, t, z, up);
            let grad = match cfg.grad_mode {
                GradMode::Approx => DpsGradient::Approx,
                GradMode::Exact => DpsGradient::Exact(&vjp),
            };
            dps_correct(&x_prev[r.clone()], &x0[r.clone()], &u_in[r], lambda, t, run.sched, &grad)
        })
        .collect();
    let mut out = Vec::with_capacity(x_prev.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::gmm::{GmmDenoiser, GmmPrior};
    use crate::diffusion::DenoiserOutput;
    use crate::volume::VoxelGrid;

    #[test]
    fn lambda_schedules() {
        assert_eq!(lambda_dps_of(1.0).unwrap(), 0.3454);
        assert!((lambda_dps_of(0.01).unwrap() - 0.0239).abs() < 5e-4);
        assert_eq!(lambda_dps_of(0.005).unwrap(), 0.0);
        assert!((lambda_mlem_of(0.01).unwrap() - 0.1568).abs() < 5e-4);
        assert!((lambda_mlem_of(1.0).unwrap() - 0.305).abs() < 1e-3);
        assert!(lambda_dps_of(0.0).is_err());
        assert!(lambda_mlem_of(1.5).is_err());
    }

    #[test]
    fn start_uses_shared_noise() {
        let grid = VoxelGrid::centered([3, 2, 2], [1.0; 3]).unwrap();
        let x_in = ImageVolume::from_vec(&grid, (0..12).map(|v| v as f64).collect()).unwrap();
        let sched = NoiseSchedule::default();
        let zero = init_start(&x_in, &sched, &[0.0; 6]).unwrap();
        let a = sched.alpha_bar(sched.t_max()).sqrt();
        for (z, x) in zero.iter().zip(&x_in.data) {
            assert_eq!(*z, a * x);
        }
        let eps: Vec<f64> = (0..6).map(|v| v as f64 * 0.3 - 1.0).collect();
        let xt = init_start(&x_in, &sched, &eps).unwrap();
        for i in 0..6 {
            let d0 = xt[i] - a * x_in.data[i];
            let d1 = xt[6 + i] - a * x_in.data[6 + i];
            assert!((d0 - d1).abs() < 1e-14);
        }
    }

    struct ConstEps;
    impl Denoiser for ConstEps {
        fn predict(&self, x_t: &[f64], _: usize, _: usize) -> Result<DenoiserOutput> {
            Ok(DenoiserOutput { eps_hat: vec![0.1; x_t.len()], v: vec![0.0; x_t.len()] })
        }
        fn eps_vjp(&self, x_t: &[f64], _: usize, _: usize, _: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![0.0; x_t.len()])
        }
    }

    #[test]
    fn dps_modes_agree_when_x0_is_linear_in_x_t() {
        let sched = NoiseSchedule::default();
        let x_t = [0.3, -0.2, 1.1];
        let x_in = [0.5, 0.5, 0.2];
        let model = ConstEps;
        for t in [5, 300, 900] {
            let eps = model.predict(&x_t, t, 0).unwrap().eps_hat;
            let x0 = predict_x0(&x_t, &eps, t, &sched).unwrap();
            let vjp = |u: &[f64]| model.eps_vjp(&x_t, t, 0, u);
            let a = dps_correct(&x_t, &x0, &x_in, 0.7, t, &sched, &DpsGradient::Approx).unwrap();
            let b = dps_correct(&x_t, &x0, &x_in, 0.7, t, &sched, &DpsGradient::Exact(&vjp)).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn dps_trivial_cases() {
        let sched = NoiseSchedule::default();
        let x = [1.0, 2.0];
        assert_eq!(dps_correct(&x, &[0.0, 0.0], &[5.0, 5.0], 0.0, 10, &sched, &DpsGradient::Approx).unwrap(), x);
        assert_eq!(dps_correct(&x, &[5.0, 4.0], &[5.0, 4.0], 3.0, 10, &sched, &DpsGradient::Approx).unwrap(), x);
        assert_eq!(dps_prox(&[1.0], &[3.0], 0.0), vec![1.0]);
        assert!((dps_prox(&[1.0], &[3.0], 1e6)[0] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn exact_gradient_matches_finite_difference_of_fidelity() {
        let sched = NoiseSchedule::default();
        let prior = GmmPrior::gaussian(vec![0.4, -0.1], 0.3).unwrap();
        let den = GmmDenoiser::new(prior, sched.clone());
        let x_t = [0.2, 0.9];
        let x_in = [0.0, 0.3];
        let t = 200;
        let fid = |x: &[f64]| {
            let e = den.predict(x, t, 0).unwrap().eps_hat;
            let x0 = predict_x0(x, &e, t, &sched).unwrap();
            x0.iter().zip(&x_in).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let e = den.predict(&x_t, t, 0).unwrap().eps_hat;
        let x0 = predict_x0(&x_t, &e, t, &sched).unwrap();
        let vjp = |u: &[f64]| den.eps_vjp(&x_t, t, 0, u);
        let g = dps_gradient(&x0, &x_in, t, &sched, &DpsGradient::Exact(&vjp)).unwrap();
        for i in 0..2 {
            let h = 1e-6;
            let mut p = x_t;
            let mut m = x_t;
            p[i] += h;
            m[i] -= h;
            let fd = (fid(&p) - fid(&m)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn unguided_gaussian_sampling_returns_to_prior_mean() {
        let sched = NoiseSchedule::default();
        let grid = VoxelGrid::centered([100, 100, 1], [1.0; 3]).unwrap();
        let mu = 2.0;
        let prior = GmmPrior::gaussian(vec![mu; grid.slice_len()], 0.25).unwrap();
        let den = GmmDenoiser::new(prior, sched.clone());
        let x_in = ImageVolume::filled(&grid, mu);
        let run = SamplerRun { x_in: &x_in, data: None, model: &den, sched: &sched, units: ValueMap::IDENTITY, seed: 4 };
        let var_of = |v: &ImageVolume| v.data.iter().map(|x| (x - v.mean()).powi(2)).sum::<f64>() / v.len() as f64;
        let heun = GuidanceConfig { solver: Solver::Heun, ..GuidanceConfig::unguided() };
        let out = sample_volume(&run, &heun).unwrap();
        assert!((out.mean() - mu).abs() / mu < 0.01, "mean {}", out.mean());
        assert!((var_of(&out) - 0.25).abs() / 0.25 < 0.08, "var {}", var_of(&out));
        // first-order DDIM contracts the spread by about a fifth at 25 steps
        let euler = sample_volume(&run, &GuidanceConfig::unguided()).unwrap();
        assert!(var_of(&euler) < 0.85 * 0.25);
    }

    #[test]
    fn sampling_is_deterministic_and_dual_noise_symmetric() {
        let sched = NoiseSchedule::default();
        let grid = VoxelGrid::centered([6, 6, 3], [1.0; 3]).unwrap();
        let prior = GmmPrior::gaussian(vec![1.0; 36], 0.2).unwrap();
        let den = GmmDenoiser::new(prior, sched.clone());
        let x_in = ImageVolume::from_vec(&grid, (0..108).map(|v| 1.0 + 0.01 * v as f64).collect()).unwrap();
        let run = SamplerRun { x_in: &x_in, data: None, model: &den, sched: &sched, units: ValueMap::IDENTITY, seed: 9 };
        let cfg = GuidanceConfig { use_mlem: false, ..GuidanceConfig::default() };
        let a = sample_volume_diagnostics(&run, &cfg).unwrap();
        let b = sample_volume_diagnostics(&run, &cfg).unwrap();
        assert_eq!(a.0.data, b.0.data);
        assert_eq!(a.1.tv_steps.len(), 2 * cfg.ddim_steps);
        for (before, after) in &a.1.tv_steps {
            assert!(after <= before);
        }
        // the two trajectories enter symmetrically, so their order cannot matter
        let mut acc = vec![0.0; 108];
        let mut d = SampleDiagnostics::default();
        for k in [1u64, 0] {
            let u = trajectory(&run, &cfg, k, 0.3454, 0.0, &mut d).unwrap();
            acc.iter_mut().zip(&u).for_each(|(x, y)| *x += y);
        }
        let swapped: Vec<f64> = acc.iter().map(|v| (v / 2.0f64).max(0.0)).collect();
        assert_eq!(swapped, a.0.data);
    }

    #[test]
    fn mlem_needs_data() {
        let sched = NoiseSchedule::default();
        let grid = VoxelGrid::centered([4, 4, 2], [1.0; 3]).unwrap();
        let den = GmmDenoiser::new(GmmPrior::gaussian(vec![0.0; 16], 1.0).unwrap(), sched.clone());
        let x_in = ImageVolume::filled(&grid, 1.0);
        let run = SamplerRun { x_in: &x_in, data: None, model: &den, sched: &sched, units: ValueMap::IDENTITY, seed: 0 };
        assert!(matches!(sample_volume(&run, &GuidanceConfig::default()), Err(Error::Precondition(_))));
        let bad = GuidanceConfig { mlem_every: 0, ..GuidanceConfig::unguided() };
        assert!(sample_volume(&run, &bad).is_err());
    }
}
