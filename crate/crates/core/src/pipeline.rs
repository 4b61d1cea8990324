//! Glue shared by the command line and the end-to-end tests: degradation
//! conditions, normalisation into network units, and one-call
//! reconstruction.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::denoiser::gmm::{GmmComponent, GmmPrior};
use crate::denoiser::net::{ConditionedNet, TinyEpsNet};
use crate::denoiser::train::TrainingVolume;
use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::geometry::{ScannerGeometry, ViewSubset};
use crate::phantom::{mask_views, thin_counts, CountLevel};
use crate::recon::mlem_reconstruct;
use crate::rng::{derive_seed, Purpose};
use crate::sampler::{sample_volume_diagnostics, GuidanceConfig, SampleDiagnostics, SamplerRun, ValueMap};
use crate::sysmat::{build_system_matrix, RestrictMode, SystemMatrix};
use crate::volume::{ImageVolume, ProjectionData, VoxelGrid};

pub const DEFAULT_COUNT_LEVELS: [f64; 5] = [0.01, 0.05, 0.1, 0.2, 0.5];
pub const DEFAULT_VIEWS: [usize; 5] = [1, 3, 5, 7, 9];

/// One degraded acquisition: a dose fraction of all detectors, or full dose
/// on a few centre-row detectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Condition {
    Count(f64),
    Views(usize),
}

impl Condition {
    pub fn defaults() -> Vec<Condition> {
        DEFAULT_COUNT_LEVELS.iter().map(|&c| Condition::Count(c)).chain(DEFAULT_VIEWS.iter().map(|&v| Condition::Views(v))).collect()
    }

    /// Dose fraction, or included / total detectors for few-view.
    pub fn count_level(&self, n_detectors: usize) -> Result<CountLevel> {
        match *self {
            Condition::Count(c) => CountLevel::new(c),
            Condition::Views(n) => CountLevel::for_views(n, n_detectors),
        }
    }

    /// Reference activity in count units for this condition.
    pub fn reference(&self, truth: &ImageVolume, count_scale: f64) -> ImageVolume {
        match *self {
            Condition::Count(c) => truth.scaled(count_scale * c),
            Condition::Views(_) => truth.scaled(count_scale),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Count(c) => {
                let p = format!("{:.4}", c * 100.0);
                write!(f, "count_{}pct", p.trim_end_matches('0').trim_end_matches('.'))
            }
            Condition::Views(n) => write!(f, "views_{n}"),
        }
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad condition {s:?}; expected count_<pct>pct or views_<n>"));
        if let Some(p) = s.strip_prefix("count_").and_then(|r| r.strip_suffix("pct")) {
            let c = p.parse::<f64>().map_err(|_| bad())? / 100.0;
            CountLevel::new(c)?;
            Ok(Condition::Count(c))
        } else if let Some(n) = s.strip_prefix("views_") {
            Ok(Condition::Views(n.parse().map_err(|_| bad())?))
        } else {
            Err(bad())
        }
    }
}

/// The scanner, its full system matrix and the few-view restrictions.
pub struct Scanner {
    pub geometry: ScannerGeometry,
    pub full: SystemMatrix,
    restricted: BTreeMap<usize, SystemMatrix>,
}

impl Scanner {
    pub fn new(geometry: ScannerGeometry, grid: &VoxelGrid) -> Result<Self> {
        let full = build_system_matrix(&geometry, grid)?;
        Ok(Self { geometry, full, restricted: BTreeMap::new() })
    }

    /// Precomputes the restricted matrices `conditions` need.
    pub fn prepare(&mut self, conditions: &[Condition]) -> Result<()> {
        for c in conditions {
            if let Condition::Views(n) = *c {
                if !self.restricted.contains_key(&n) {
                    let sub = ViewSubset::preset(&self.geometry, n)?;
                    self.restricted.insert(n, self.full.restrict_views(&sub, RestrictMode::Remove)?);
                }
            }
        }
        Ok(())
    }

    /// System matrix seen by `cond`; call [`prepare`](Self::prepare) first.
    pub fn matrix(&self, cond: &Condition) -> Result<&SystemMatrix> {
        match cond {
            Condition::Count(_) => Ok(&self.full),
            Condition::Views(n) => self.restricted.get(n).ok_or_else(|| Error::Precondition(format!("view preset {n} not prepared"))),
        }
    }

    /// Degraded data for `cond` from full-dose counts.
    pub fn degrade(&self, y_full: &ProjectionData, cond: &Condition, seed: u64) -> Result<ProjectionData> {
        match *cond {
            Condition::Count(c) => thin_counts(y_full, CountLevel::new(c)?, seed),
            Condition::Views(n) => mask_views(y_full, &ViewSubset::preset(&self.geometry, n)?),
        }
    }
}

/// `sum(sens * x) / sum(sens)`.
pub fn sensitivity_level(x: &ImageVolume, sens: &ImageVolume) -> f64 {
    x.dot(sens) / sens.sum()
}

/// Mean ratio of peak to sensitivity-weighted level over a set of truths.
pub fn estimate_kappa(truths: &[ImageVolume], sens: &ImageVolume) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::param("need at least one volume to estimate kappa"));
    }
    let mut acc = 0.0;
    for t in truths {
        let level = sensitivity_level(t, sens);
        if !(level > 0.0) {
            return Err(Error::Degenerate("volume has no activity the scanner sees".into()));
        }
        acc += t.max() / level;
    }
    Ok(acc / truths.len() as f64)
}

/// A clean activity volume in network units, paired with its anatomy.
pub fn training_volume(truth: &ImageVolume, anatomy: &ImageVolume, sens: &ImageVolume, kappa: f64) -> Result<TrainingVolume> {
    let map = ValueMap::from_level(sensitivity_level(truth, sens), kappa)?;
    Ok(TrainingVolume { x0: ImageVolume::from_vec(&truth.grid, map.to_units(&truth.data))?, anatomy: anatomy.clone() })
}

/// Seed of the degraded draw for phantom `index` under `cond`.
pub fn condition_seed(seed: u64, index: u64, cond: &Condition) -> u64 {
    let tag = match *cond {
        Condition::Count(c) => (c * 1e6).round() as u64,
        Condition::Views(n) => 1_000_000_000 + n as u64,
    };
    derive_seed(derive_seed(seed, Purpose::Thinning, index), Purpose::Thinning, tag)
}

/// MLEM baseline for one degraded acquisition.
pub fn mlem_baseline(s: &SystemMatrix, y: &ProjectionData, iters: usize) -> Result<ImageVolume> {
    mlem_reconstruct(s, y, iters, None)
}

/// Sampler seed for phantom `index` under `cond`.
pub fn sample_seed(seed: u64, index: u64, cond: &Condition) -> u64 {
    derive_seed(condition_seed(seed, index, cond), Purpose::StartNoise, 0)
}

/// Guided diffusion reconstruction with a trained network.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_reconstruct(
    net: &TinyEpsNet,
    kappa: f64,
    anatomy: &ImageVolume,
    s: &SystemMatrix,
    y: &ProjectionData,
    x_in: &ImageVolume,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<(ImageVolume, SampleDiagnostics)> {
    let model = ConditionedNet::new(net, anatomy)?;
    guided_reconstruct(&model, net.schedule(), kappa, s, y, x_in, cfg, seed)
}

/// Guided reconstruction with any noise predictor working in network units.
#[allow(clippy::too_many_arguments)]
pub fn guided_reconstruct(
    model: &dyn Denoiser,
    sched: &NoiseSchedule,
    kappa: f64,
    s: &SystemMatrix,
    y: &ProjectionData,
    x_in: &ImageVolume,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<(ImageVolume, SampleDiagnostics)> {
    let units = ValueMap::from_counts(s, y, kappa)?;
    let run = SamplerRun { x_in, data: Some((s, y)), model, sched, units, seed };
    sample_volume_diagnostics(&run, cfg)
}

/// One Gaussian per slice position fitted to training volumes: per-pixel
/// mean and the pooled per-pixel variance.
pub fn fit_slice_priors(data: &[TrainingVolume]) -> Result<Vec<GmmPrior>> {
    let first = data.first().ok_or_else(|| Error::param("need at least one training volume"))?;
    let nz = first.x0.grid.dims[2];
    let hw = first.x0.grid.slice_len();
    let n = data.len() as f64;
    (0..nz)
        .map(|z| {
            let mut mean = vec![0.0; hw];
            for d in data {
                mean.iter_mut().zip(d.x0.slice(z)).for_each(|(m, v)| *m += v / n);
            }
            let var =
                data.iter().flat_map(|d| d.x0.slice(z).iter().zip(&mean).map(|(v, m)| (v - m).powi(2))).sum::<f64>() / (n * hw as f64);
            GmmPrior::new(vec![GmmComponent { weight: 1.0, mean, variance: var.max(1e-4) }])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_labels_round_trip() {
        for c in Condition::defaults() {
            assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
        }
        assert_eq!(Condition::Count(0.01).to_string(), "count_1pct");
        assert!("count_0pct".parse::<Condition>().is_err());
        assert!("views".parse::<Condition>().is_err());
        assert_eq!(Condition::defaults().len(), 10);
    }

    #[test]
    fn view_condition_level_is_detector_fraction() {
        assert!((Condition::Views(9).count_level(19).unwrap().value() - 9.0 / 19.0).abs() < 1e-15);
    }

    #[test]
    fn condition_seeds_differ() {
        let a = condition_seed(1, 0, &Condition::Count(0.05));
        assert_ne!(a, condition_seed(1, 0, &Condition::Count(0.1)));
        assert_ne!(a, condition_seed(1, 1, &Condition::Count(0.05)));
        assert_eq!(a, condition_seed(1, 0, &Condition::Count(0.05)));
        assert_ne!(a, sample_seed(1, 0, &Condition::Count(0.05)));
    }

    #[test]
    fn slice_priors_match_data_moments() {
        let grid = VoxelGrid::centered([2, 1, 2], [1.0; 3]).unwrap();
        let vol = |d: Vec<f64>| TrainingVolume { x0: ImageVolume::from_vec(&grid, d).unwrap(), anatomy: ImageVolume::zeros(&grid) };
        let data = [vol(vec![0.0, 2.0, 1.0, 1.0]), vol(vec![2.0, 2.0, 1.0, 1.0])];
        let p = fit_slice_priors(&data).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].mean(), vec![1.0, 2.0]);
        assert!((p[0].components()[0].variance - 0.5).abs() < 1e-12);
        assert_eq!(p[1].components()[0].variance, 1e-4);
    }
}
