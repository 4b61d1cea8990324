//! Training loop for [`TinyEpsNet`] on fully sampled volumes.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diffusion::{hybrid_loss, q_sample, LossTerms, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::volume::ImageVolume;

use super::net::{ConditionStack, DataStats, TinyEpsNet};

/// One training example: a clean volume in network units and its anatomy.
#[derive(Clone, Debug)]
pub struct TrainingVolume {
    pub x0: ImageVolume,
    pub anatomy: ImageVolume,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; `0` disables it.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, learning_rate: 0.02, momentum: 0.9, clip_norm: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Mean batch loss per step, in step order.
    pub losses: Vec<f64>,
    pub first_step: u64,
    pub velocity: Vec<f64>,
}

impl TrainReport {
    /// `step,loss` rows with a header.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (k, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l:.9e}\n", self.first_step + k as u64 + 1));
        }
        s
    }
}

/// Loss and parameter gradient for one slice of one volume.
pub fn training_loss(
    net: &TinyEpsNet,
    sample: &TrainingVolume,
    slice: usize,
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<(LossTerms, Vec<f64>)> {
    let [nx, ny, _] = sample.x0.grid.dims;
    let x0 = sample.x0.slice(slice);
    let x_t = q_sample(x0, t, eps, sched)?;
    let anat = ConditionStack::new(&sample.anatomy, slice)?.channels();
    let (out, cache) = net.forward(&x_t, &anat, ny, nx, t, slice)?;
    let terms = hybrid_loss(x0, &x_t, eps, &out, t, sched)?;
    let mut g = vec![0.0; net.n_params()];
    net.backward(&cache, &terms.d_eps_hat, &terms.d_v, Some(&mut g));
    Ok((terms, g))
}

/// Scalar Gaussian fit of a data set, used for the network preconditioning.
pub fn data_stats(data: &[TrainingVolume]) -> DataStats {
    let n: usize = data.iter().map(|d| d.x0.data.len()).sum();
    if n == 0 {
        return DataStats::default();
    }
    let mean = data.iter().flat_map(|d| &d.x0.data).sum::<f64>() / n as f64;
    let var = data.iter().flat_map(|d| &d.x0.data).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    DataStats { mean, std: var.sqrt().max(1e-3) }
}

fn validate(net: &TinyEpsNet, data: &[TrainingVolume], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) || !(cfg.clip_norm >= 0.0) {
        return Err(Error::param("need batch_size >= 1, learning_rate >= 0, 0 <= momentum < 1, clip_norm >= 0"));
    }
    let dims = data[0].x0.grid.dims;
    for d in data {
        if d.x0.grid.dims != dims || d.anatomy.grid.dims != dims {
            return Err(Error::shape("training volumes and anatomy must share one grid"));
        }
    }
    if dims[2] != net.config().n_slices {
        return Err(Error::shape(format!("volumes have {} slices, network expects {}", dims[2], net.config().n_slices)));
    }
    Ok(())
}

/// Momentum SGD on the hybrid loss. Each step draws `batch_size` (volume,
/// slice, t, eps) tuples from a stream keyed by the global step number, so
/// a resumed run continues the same sequence.
pub fn train(
    net: &mut TinyEpsNet,
    data: &[TrainingVolume],
    cfg: &TrainConfig,
    first_step: u64,
    velocity: Option<Vec<f64>>,
) -> Result<TrainReport> {
    validate(net, data, cfg)?;
    let sched = net.schedule().clone();
    let nz = net.config().n_slices;
    let hw = data[0].x0.grid.slice_len();
    let mut vel = match velocity {
        Some(v) if v.len() == net.n_params() => v,
        Some(_) => return Err(Error::shape("velocity length does not match the network")),
        None => vec![0.0; net.n_params()],
    };
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut initial = None;
    for k in 0..cfg.steps {
        let step = first_step + k as u64;
        let draws: Vec<(usize, usize, usize, Vec<f64>)> = (0..cfg.batch_size)
            .map(|b| {
                let mut rng = stream(cfg.seed, Purpose::Training, step * cfg.batch_size as u64 + b as u64);
                let v = rng.random_range(0..data.len());
                let s = rng.random_range(0..nz);
                let t = rng.random_range(1..=sched.t_max());
                let eps = (0..hw).map(|_| rng.sample(StandardNormal)).collect();
                (v, s, t, eps)
            })
            .collect();
        let net_ref = &*net;
        let results: Vec<Result<(LossTerms, Vec<f64>)>> =
            draws.par_iter().map(|(v, s, t, eps)| training_loss(net_ref, &data[*v], *s, *t, eps, &sched)).collect();
        let mut grad = vec![0.0; net.n_params()];
        let mut loss = 0.0;
        for r in results {
            let (terms, g) = r?;
            loss += terms.loss;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        loss *= inv;
        grad.iter_mut().for_each(|g| *g *= inv);

        let init = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 1e3 * init {
            return Err(Error::Training(format!("loss {loss:.4e} at step {} exceeds 1e3 x initial {init:.4e}", step + 1)));
        }
        if cfg.clip_norm > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.clip_norm {
                let s = cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        for ((p, v), g) in net.params_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.learning_rate * *v;
        }
        if (k + 1) % 100 == 0 {
            log::info!("step {} loss {loss:.5}", step + 1);
        }
        losses.push(loss);
    }
    Ok(TrainReport { losses, first_step, velocity: vel })
}

/// Moving average over `window` steps.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for (i, l) in losses.iter().enumerate() {
        acc += l;
        if i >= w {
            acc -= losses[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::net::NetConfig;
    use crate::volume::VoxelGrid;

    fn toy_data(n: usize) -> Vec<TrainingVolume> {
        let grid = VoxelGrid::centered([8, 8, 4], [1.0; 3]).unwrap();
        (0..n)
            .map(|k| {
                let mut x0 = ImageVolume::zeros(&grid);
                let mut anat = ImageVolume::zeros(&grid);
                let c: usize = 2 + k % 4;
                for z in 0..4 {
                    for y in 0..8usize {
                        for x in 0..8usize {
                            let inside = x.abs_diff(c) <= 1 && y.abs_diff(4usize) <= 2;
                            let i = grid.index(x, y, z);
                            x0.data[i] = if inside { 0.8 } else { -0.8 };
                            anat.data[i] = if inside { 1.0 } else { 0.2 };
                        }
                    }
                }
                TrainingVolume { x0, anatomy: anat }
            })
            .collect()
    }

    fn toy_net(data: &[TrainingVolume]) -> TinyEpsNet {
        let cfg = NetConfig::new(4, 4, 8).unwrap();
        TinyEpsNet::init(cfg, NoiseSchedule::default(), data_stats(data), 9)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = toy_data(3);
        let mut net = toy_net(&data);
        let before = net.params().to_vec();
        let cfg = TrainConfig { steps: 5, learning_rate: 0.0, batch_size: 2, ..Default::default() };
        train(&mut net, &data, &cfg, 0, None).unwrap();
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn same_seed_same_curve() {
        let data = toy_data(3);
        let cfg = TrainConfig { steps: 6, batch_size: 3, ..Default::default() };
        let mut a = toy_net(&data);
        let mut b = toy_net(&data);
        let ra = train(&mut a, &data, &cfg, 0, None).unwrap();
        let rb = train(&mut b, &data, &cfg, 0, None).unwrap();
        assert_eq!(ra.losses, rb.losses);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn split_run_matches_single_run() {
        let data = toy_data(2);
        let cfg = TrainConfig { steps: 6, batch_size: 2, ..Default::default() };
        let mut a = toy_net(&data);
        let ra = train(&mut a, &data, &cfg, 0, None).unwrap();
        let mut b = toy_net(&data);
        let half = TrainConfig { steps: 3, ..cfg.clone() };
        let r1 = train(&mut b, &data, &half, 0, None).unwrap();
        let r2 = train(&mut b, &data, &half, 3, Some(r1.velocity)).unwrap();
        assert!(r2.loss_csv().lines().nth(1).unwrap().starts_with("4,"));
        assert_eq!([r1.losses, r2.losses].concat(), ra.losses);
    }

    #[test]
    fn loss_decreases_on_toy_set() {
        let data = toy_data(8);
        let mut net = toy_net(&data);
        let cfg = TrainConfig { steps: 300, batch_size: 4, learning_rate: 0.02, ..Default::default() };
        let r = train(&mut net, &data, &cfg, 0, None).unwrap();
        let s = smoothed(&r.losses, 50);
        assert!(s[s.len() - 1] < 0.9 * s[49], "{} vs {}", s[s.len() - 1], s[49]);
    }

    #[test]
    fn empty_or_mismatched_data_is_rejected() {
        let data = toy_data(1);
        let mut net = toy_net(&data);
        assert!(train(&mut net, &[], &TrainConfig::default(), 0, None).is_err());
        let cfg = NetConfig::new(5, 2, 8).unwrap();
        let mut wrong = TinyEpsNet::zeros(cfg, NoiseSchedule::default());
        assert!(train(&mut wrong, &data, &TrainConfig::default(), 0, None).is_err());
    }
}
