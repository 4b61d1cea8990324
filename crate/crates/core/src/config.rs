//! Flat `key=value` run configuration.
//!
//! Every key has a default; a document only lists overrides. Unknown keys
//! are rejected. [`RunConfig::to_text`] writes every key in sorted order and
//! [`RunConfig::hash`] digests that canonical text.

use std::fmt::Display;
use std::str::FromStr;

use crate::denoiser::net::NetConfig;
use crate::denoiser::train::TrainConfig;
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::{build_geometry, ScannerGeometry, DEFAULT_PIXELS};
use crate::io::{parse_key_values, sha256_hex};
use crate::pipeline::Condition;
use crate::rng::{derive_seed, Purpose};
use crate::sampler::{GradMode, GuidanceConfig, Lambda, Ordering, Solver};
use crate::volume::VoxelGrid;

/// Phantom indices at or above this offset are training volumes.
pub const TRAIN_INDEX_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid_dims: [usize; 3],
    pub voxel_mm: f64,
    pub geometry_scale: f64,
    pub detector_pixels: usize,
    /// Held-out phantoms with degraded acquisitions.
    pub phantoms: usize,
    /// Clean phantoms the network is trained on.
    pub train_phantoms: usize,
    pub full_counts: u64,
    pub mlem_iters: usize,
    pub conditions: Vec<Condition>,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub channels: usize,
    pub embed_dim: usize,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    /// Conditions the sweep runs ablations on.
    pub ablation_conditions: Vec<Condition>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let conditions = Condition::defaults();
        Self {
            seed: 0,
            grid_dims: [32, 32, 16],
            voxel_mm: 4.0,
            geometry_scale: 1.0,
            detector_pixels: DEFAULT_PIXELS,
            phantoms: 20,
            train_phantoms: 48,
            full_counts: 1_000_000,
            mlem_iters: 50,
            ablation_conditions: conditions.clone(),
            conditions,
            t_max: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            channels: 16,
            embed_dim: 32,
            train: TrainConfig { steps: 6000, batch_size: 8, learning_rate: 0.02, momentum: 0.9, clip_norm: 1.0, seed: 0 },
            guidance: GuidanceConfig { clip_x0: Some((-1.0, 3.0)), ..GuidanceConfig::default() },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn lambda_text(l: Lambda) -> String {
    match l {
        Lambda::Auto => "auto".into(),
        Lambda::Value(v) => v.to_string(),
    }
}

pub fn parse_lambda(key: &str, v: &str) -> Result<Lambda> {
    if v == "auto" {
        Ok(Lambda::Auto)
    } else {
        Ok(Lambda::Value(parse(key, v)?))
    }
}

pub fn parse_grad_mode(v: &str) -> Result<GradMode> {
    match v {
        "approx" => Ok(GradMode::Approx),
        "exact" => Ok(GradMode::Exact),
        _ => Err(Error::Config(format!("grad mode must be approx or exact, got {v:?}"))),
    }
}

fn grad_mode_text(g: GradMode) -> &'static str {
    match g {
        GradMode::Approx => "approx",
        GradMode::Exact => "exact",
    }
}

impl RunConfig {
    /// Defaults overridden by the keys in `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Self::default();
        for (k, v) in &kv {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.guidance;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "grid.dims" => {
                let d: Vec<usize> = parse_list(key, v)?;
                self.grid_dims = d.try_into().map_err(|_| Error::Config("grid.dims needs three values".into()))?;
            }
            "grid.voxel_mm" => self.voxel_mm = parse(key, v)?,
            "geometry.scale" => self.geometry_scale = parse(key, v)?,
            "geometry.pixels" => self.detector_pixels = parse(key, v)?,
            "sim.phantoms" => self.phantoms = parse(key, v)?,
            "sim.train_phantoms" => self.train_phantoms = parse(key, v)?,
            "sim.full_counts" => self.full_counts = parse(key, v)?,
            "sim.mlem_iters" => self.mlem_iters = parse(key, v)?,
            "sim.conditions" => self.conditions = parse_list(key, v)?,
            "schedule.t_max" => self.t_max = parse(key, v)?,
            "schedule.beta_start" => self.beta_start = parse(key, v)?,
            "schedule.beta_end" => self.beta_end = parse(key, v)?,
            "net.channels" => self.channels = parse(key, v)?,
            "net.embed_dim" => self.embed_dim = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "guidance.lambda_dps" => g.lambda_dps = parse_lambda(key, v)?,
            "guidance.lambda_mlem" => g.lambda_mlem = parse_lambda(key, v)?,
            "guidance.mlem_every" => g.mlem_every = parse(key, v)?,
            "guidance.mlem_iters" => g.mlem_iters = parse(key, v)?,
            "guidance.ddim_steps" => g.ddim_steps = parse(key, v)?,
            "guidance.tv_weight" => g.tv_weight = parse(key, v)?,
            "guidance.tv_inner" => g.tv_inner = parse(key, v)?,
            "guidance.dual_noise" => g.dual_noise = parse_bool(key, v)?,
            "guidance.grad_mode" => g.grad_mode = parse_grad_mode(v)?,
            "guidance.ordering" => {
                g.ordering = match v {
                    "estimate" => Ordering::Estimate,
                    "latent" => Ordering::Latent,
                    _ => return Err(Error::Config(format!("{key}: expected estimate or latent, got {v:?}"))),
                }
            }
            "guidance.solver" => {
                g.solver = match v {
                    "ddim" => Solver::Ddim,
                    "heun" => Solver::Heun,
                    _ => return Err(Error::Config(format!("{key}: expected ddim or heun, got {v:?}"))),
                }
            }
            "guidance.clip_x0" => {
                g.clip_x0 = if v == "none" {
                    None
                } else {
                    let b: Vec<f64> = parse_list(key, v)?;
                    match b[..] {
                        [lo, hi] => Some((lo, hi)),
                        _ => return Err(Error::Config(format!("{key}: expected none or lo,hi"))),
                    }
                }
            }
            "sweep.ablation_conditions" => self.ablation_conditions = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.guidance;
        let mut e = vec![
            ("seed", self.seed.to_string()),
            ("grid.dims", join(&self.grid_dims)),
            ("grid.voxel_mm", self.voxel_mm.to_string()),
            ("geometry.scale", self.geometry_scale.to_string()),
            ("geometry.pixels", self.detector_pixels.to_string()),
            ("sim.phantoms", self.phantoms.to_string()),
            ("sim.train_phantoms", self.train_phantoms.to_string()),
            ("sim.full_counts", self.full_counts.to_string()),
            ("sim.mlem_iters", self.mlem_iters.to_string()),
            ("sim.conditions", join(&self.conditions)),
            ("schedule.t_max", self.t_max.to_string()),
            ("schedule.beta_start", self.beta_start.to_string()),
            ("schedule.beta_end", self.beta_end.to_string()),
            ("net.channels", self.channels.to_string()),
            ("net.embed_dim", self.embed_dim.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.learning_rate", self.train.learning_rate.to_string()),
            ("train.momentum", self.train.momentum.to_string()),
            ("train.clip_norm", self.train.clip_norm.to_string()),
            ("guidance.lambda_dps", lambda_text(g.lambda_dps)),
            ("guidance.lambda_mlem", lambda_text(g.lambda_mlem)),
            ("guidance.mlem_every", g.mlem_every.to_string()),
            ("guidance.mlem_iters", g.mlem_iters.to_string()),
            ("guidance.ddim_steps", g.ddim_steps.to_string()),
            ("guidance.tv_weight", g.tv_weight.to_string()),
            ("guidance.tv_inner", g.tv_inner.to_string()),
            ("guidance.dual_noise", g.dual_noise.to_string()),
            ("guidance.grad_mode", grad_mode_text(g.grad_mode).into()),
            (
                "guidance.ordering",
                match g.ordering {
                    Ordering::Estimate => "estimate",
                    Ordering::Latent => "latent",
                }
                .into(),
            ),
            (
                "guidance.solver",
                match g.solver {
                    Solver::Ddim => "ddim",
                    Solver::Heun => "heun",
                }
                .into(),
            ),
            ("guidance.clip_x0", g.clip_x0.map_or("none".into(), |(lo, hi)| format!("{lo},{hi}"))),
            ("sweep.ablation_conditions", join(&self.ablation_conditions)),
        ];
        e.sort_by_key(|(k, _)| *k);
        e
    }

    /// Canonical text: every key, sorted, one per line.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of [`to_text`](Self::to_text).
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.grid().map_err(wrap)?;
        self.geometry().map_err(wrap)?;
        self.schedule().map_err(wrap)?;
        self.net_config().map_err(wrap)?;
        self.guidance.validate().map_err(wrap)?;
        if self.full_counts == 0 || self.mlem_iters == 0 {
            return Err(Error::Config("sim.full_counts and sim.mlem_iters must be >= 1".into()));
        }
        if self.train.batch_size == 0 || !(0.0..1.0).contains(&self.train.momentum) || !(self.train.learning_rate >= 0.0) {
            return Err(Error::Config("train needs batch_size >= 1, learning_rate >= 0, 0 <= momentum < 1".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<VoxelGrid> {
        VoxelGrid::centered(self.grid_dims, [self.voxel_mm; 3])
    }

    pub fn geometry(&self) -> Result<ScannerGeometry> {
        build_geometry(self.geometry_scale, self.detector_pixels)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_max, self.beta_start, self.beta_end)
    }

    pub fn net_config(&self) -> Result<NetConfig> {
        NetConfig::new(self.grid_dims[2], self.channels, self.embed_dim)
    }

    /// Training options with the stream seed taken from the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, Purpose::Training, 0), ..self.train.clone() }
    }

    /// Phantom seed for held-out index `i`.
    pub fn phantom_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, Purpose::Phantom, i as u64)
    }

    /// Phantom seed for training index `k`; disjoint from held-out seeds.
    pub fn train_phantom_seed(&self, k: usize) -> u64 {
        derive_seed(self.seed, Purpose::Phantom, TRAIN_INDEX_OFFSET + k as u64)
    }
}
