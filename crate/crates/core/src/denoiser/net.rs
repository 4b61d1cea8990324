//! Tiny 2.5D conditional noise predictor with hand-written backprop.
//!
//! Per slice the input is `x_t` plus the `N_z` anatomy slices scaled by
//! [`depth_weights`](super::depth_weights). Layers:
//!
//! ```text
//! emb  = lin2(silu(lin1(sin(t) + sin_cos(slice))))   -> (g1, b1, g2, b2)
//! h1   = silu((conv_x(c_in x_t) + conv_a(anatomy)) * (1 + g1) + b1)
//! h2   = silu(conv2(h1) * (1 + g2) + b2)                3x3, dilation 2
//! out  = conv3(h2) + skip(c_in x_t, anatomy)
//! eps  = out[0] + gate * k(t) * (x_t - sqrt(abar) mu)
//! v    = sigmoid(out[1])
//! ```
//!
//! `c_in(t)` and `k(t)` come from a Gaussian fit `(mu, sd)` of the training
//! data; `k(t)(x_t - sqrt(abar) mu)` is the exact predictor for that
//! Gaussian, so the convolutions only learn the residual.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::diffusion::{DenoiserOutput, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::volume::ImageVolume;

use super::{depth_weight, Denoiser};

const TIME_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub n_slices: usize,
    pub channels: usize,
    pub embed_dim: usize,
}

impl NetConfig {
    pub fn new(n_slices: usize, channels: usize, embed_dim: usize) -> Result<Self> {
        if n_slices == 0 || channels == 0 {
            return Err(Error::param("network needs n_slices >= 1 and channels >= 1"));
        }
        if embed_dim < 2 || !embed_dim.is_multiple_of(2) {
            return Err(Error::param(format!("embedding dimension must be even and >= 2, got {embed_dim}")));
        }
        Ok(Self { n_slices, channels, embed_dim })
    }

    /// Named parameter tensors in storage order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (c, e, nz) = (self.channels, self.embed_dim, self.n_slices);
        vec![
            ("lin1.w", vec![e, e]),
            ("lin1.b", vec![e]),
            ("lin2.w", vec![4 * c, e]),
            ("lin2.b", vec![4 * c]),
            ("conv_x.w", vec![c, 1, 3, 3]),
            ("conv_x.b", vec![c]),
            ("conv_a.w", vec![c, nz, 1, 1]),
            ("conv2.w", vec![c, c, 3, 3]),
            ("conv2.b", vec![c]),
            ("conv3.w", vec![2, c, 3, 3]),
            ("conv3.b", vec![2]),
            ("skip.w", vec![2, 1 + nz, 1, 1]),
            ("gate", vec![1]),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(|(_, d)| d.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Offsets {
    lin1_w: usize,
    lin1_b: usize,
    lin2_w: usize,
    lin2_b: usize,
    convx_w: usize,
    convx_b: usize,
    conva_w: usize,
    conv2_w: usize,
    conv2_b: usize,
    conv3_w: usize,
    conv3_b: usize,
    skip_w: usize,
    gate: usize,
    total: usize,
}

impl Offsets {
    fn new(cfg: &NetConfig) -> Self {
        let mut at = 0;
        let mut starts = Vec::new();
        for (_, dims) in cfg.layout() {
            starts.push(at);
            at += dims.iter().product::<usize>();
        }
        Offsets {
            lin1_w: starts[0],
            lin1_b: starts[1],
            lin2_w: starts[2],
            lin2_b: starts[3],
            convx_w: starts[4],
            convx_b: starts[5],
            conva_w: starts[6],
            conv2_w: starts[7],
            conv2_b: starts[8],
            conv3_w: starts[9],
            conv3_b: starts[10],
            skip_w: starts[11],
            gate: starts[12],
            total: at,
        }
    }
}

/// Gaussian summary of the training data in network units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for DataStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct TinyEpsNet {
    cfg: NetConfig,
    off: Offsets,
    params: Vec<f64>,
    stats: DataStats,
    sched: NoiseSchedule,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    h: usize,
    w: usize,
    t: usize,
    xs: Vec<f64>,
    anat: Option<Vec<f64>>,
    e0: Vec<f64>,
    z1: Vec<f64>,
    s1: Vec<f64>,
    film: Vec<f64>,
    a1: Vec<f64>,
    p1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    p2: Vec<f64>,
    h2: Vec<f64>,
    out1: Vec<f64>,
    base: Vec<f64>,
}

/// Anatomy channels for one target slice.
#[derive(Clone, Copy, Debug)]
pub struct ConditionStack<'a> {
    pub anatomy: &'a ImageVolume,
    pub slice: usize,
}

impl<'a> ConditionStack<'a> {
    pub fn new(anatomy: &'a ImageVolume, slice: usize) -> Result<Self> {
        let nz = anatomy.grid.dims[2];
        if slice >= nz {
            return Err(Error::param(format!("slice {slice} out of range 0..{nz}")));
        }
        Ok(Self { anatomy, slice })
    }

    /// `N_z` channels, channel `j` = anatomy slice `j` times `w(slice, j)`.
    pub fn channels(&self) -> Vec<f64> {
        let nz = self.anatomy.grid.dims[2];
        let mut out = Vec::with_capacity(self.anatomy.data.len());
        for j in 0..nz {
            let wj = depth_weight(self.slice, j, nz);
            out.extend(self.anatomy.slice(j).iter().map(|a| a * wj));
        }
        out
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

fn linear_forward(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter().enumerate().map(|(o, bo)| bo + w[o * n_in..(o + 1) * n_in].iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
}

/// Accumulates parameter gradients and returns `d x`.
fn linear_backward(w: &[f64], x: &[f64], gy: &[f64], gw: &mut [f64], gb: &mut [f64]) -> Vec<f64> {
    let n_in = x.len();
    let mut gx = vec![0.0; n_in];
    for (o, &g) in gy.iter().enumerate() {
        gb[o] += g;
        let row = &w[o * n_in..(o + 1) * n_in];
        let grow = &mut gw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] += g * x[i];
            gx[i] += g * row[i];
        }
    }
    gx
}

/// Valid output range for a kernel tap offset `d` along an axis of length `n`.
#[inline]
fn tap_range(d: isize, n: usize) -> (usize, usize) {
    let lo = ((-d).max(0) as usize).min(n);
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

struct ConvShape {
    cin: usize,
    cout: usize,
    k: usize,
    dil: usize,
    h: usize,
    w: usize,
}

impl ConvShape {
    #[inline]
    fn offset(&self, ky: usize, kx: usize) -> (isize, isize) {
        let r = (self.k / 2) as isize;
        ((ky as isize - r) * self.dil as isize, (kx as isize - r) * self.dil as isize)
    }
}

/// Zero-padded "same" convolution, accumulated into `out`.
fn conv_forward(s: &ConvShape, inp: &[f64], wt: &[f64], out: &mut [f64]) {
    let hw = s.h * s.w;
    for co in 0..s.cout {
        let o = &mut out[co * hw..(co + 1) * hw];
        for ci in 0..s.cin {
            let src = &inp[ci * hw..(ci + 1) * hw];
            for ky in 0..s.k {
                for kx in 0..s.k {
                    let wv = wt[((co * s.cin + ci) * s.k + ky) * s.k + kx];
                    let (dy, dx) = s.offset(ky, kx);
                    let (y0, y1) = tap_range(dy, s.h);
                    let (x0, x1) = tap_range(dx, s.w);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let orow = &mut o[y * s.w + x0..y * s.w + x1];
                        let srow = &src[sy * s.w + sx0..sy * s.w + sx0 + (x1 - x0)];
                        for (a, b) in orow.iter_mut().zip(srow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward(s: &ConvShape, inp: &[f64], wt: &[f64], gout: &[f64], gw: &mut [f64], mut gin: Option<&mut [f64]>) {
    let hw = s.h * s.w;
    for co in 0..s.cout {
        let g = &gout[co * hw..(co + 1) * hw];
        for ci in 0..s.cin {
            let src = &inp[ci * hw..(ci + 1) * hw];
            for ky in 0..s.k {
                for kx in 0..s.k {
                    let widx = ((co * s.cin + ci) * s.k + ky) * s.k + kx;
                    let wv = wt[widx];
                    let (dy, dx) = s.offset(ky, kx);
                    let (y0, y1) = tap_range(dy, s.h);
                    let (x0, x1) = tap_range(dx, s.w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let grow = &g[y * s.w + x0..y * s.w + x1];
                        let srow = &src[sy * s.w + sx0..sy * s.w + sx0 + (x1 - x0)];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = gin.as_deref_mut() {
                            let irow = &mut gi[ci * hw + sy * s.w + sx0..ci * hw + sy * s.w + sx0 + (x1 - x0)];
                            for (a, b) in irow.iter_mut().zip(grow) {
                                *a += wv * b;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], b: &[f64], hw: usize) {
    for (c, bc) in b.iter().enumerate() {
        out[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += bc);
    }
}

fn bias_grad(g: &[f64], gb: &mut [f64], hw: usize) {
    for (c, gbc) in gb.iter_mut().enumerate() {
        *gbc += g[c * hw..(c + 1) * hw].iter().sum::<f64>();
    }
}

impl TinyEpsNet {
    /// All parameters zero.
    pub fn zeros(cfg: NetConfig, sched: NoiseSchedule) -> Self {
        let off = Offsets::new(&cfg);
        Self { cfg, off, params: vec![0.0; off.total], stats: DataStats::default(), sched }
    }

    /// Scaled normal init; the FiLM and output layers start small and the
    /// Gaussian gate starts open.
    pub fn init(cfg: NetConfig, sched: NoiseSchedule, stats: DataStats, seed: u64) -> Self {
        let mut net = Self::zeros(cfg, sched);
        net.stats = stats;
        let mut rng = stream(seed, Purpose::Init, 0);
        let (c, e, nz) = (cfg.channels, cfg.embed_dim, cfg.n_slices);
        let o = net.off;
        let mut fill = |p: &mut [f64], std: f64| {
            for v in p.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = z * std;
            }
        };
        fill(&mut net.params[o.lin1_w..o.lin1_b], (1.0 / e as f64).sqrt());
        fill(&mut net.params[o.lin2_w..o.lin2_b], 0.1 * (1.0 / e as f64).sqrt());
        fill(&mut net.params[o.convx_w..o.convx_b], (2.0 / 9.0f64).sqrt());
        fill(&mut net.params[o.conva_w..o.conv2_w], (2.0 / nz as f64).sqrt());
        fill(&mut net.params[o.conv2_w..o.conv2_b], (2.0 / (9 * c) as f64).sqrt());
        fill(&mut net.params[o.conv3_w..o.conv3_b], 0.1 * (1.0 / (9 * c) as f64).sqrt());
        net.params[o.gate] = 1.0;
        net
    }

    pub fn config(&self) -> NetConfig {
        self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn stats(&self) -> DataStats {
        self.stats
    }

    pub fn set_stats(&mut self, stats: DataStats) {
        self.stats = stats;
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named views into the parameter vector.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut at = 0;
        self.cfg
            .layout()
            .into_iter()
            .map(|(name, dims)| {
                let n: usize = dims.iter().product();
                let s = &self.params[at..at + n];
                at += n;
                (name, dims, s)
            })
            .collect()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.off.total {
            return Err(Error::shape(format!("expected {} parameters, got {}", self.off.total, params.len())));
        }
        self.params = params;
        Ok(())
    }

    fn p(&self, start: usize, len: usize) -> &[f64] {
        &self.params[start..start + len]
    }

    /// `c_in(t)` and `k(t)` of the Gaussian preconditioning.
    fn precond(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.sched.alpha_bar(t);
        let var = ab * self.stats.std * self.stats.std + 1.0 - ab;
        (1.0 / var.sqrt(), (1.0 - ab).sqrt() / var, ab.sqrt() * self.stats.mean)
    }

    fn time_slice_code(&self, t: usize, slice: usize) -> Vec<f64> {
        let half = self.cfg.embed_dim / 2;
        let nz = self.cfg.n_slices as f64;
        let mut e = vec![0.0; 2 * half];
        for k in 0..half {
            let f = TIME_BASE.powf(-(k as f64) / half as f64);
            let om = std::f64::consts::PI * (k + 1) as f64 / nz;
            e[k] = (t as f64 * f).sin() + (slice as f64 * om).sin();
            e[half + k] = (t as f64 * f).cos() + (slice as f64 * om).cos();
        }
        e
    }

    fn check_inputs(&self, t: usize, slice: usize) -> Result<()> {
        self.sched.check_t(t)?;
        if slice >= self.cfg.n_slices {
            return Err(Error::param(format!("slice {slice} out of range 0..{}", self.cfg.n_slices)));
        }
        Ok(())
    }

    /// Embedding vector `(g1, b1, g2, b2)` for timestep `t` and slice index.
    pub fn slice_embedding(&self, t: usize, slice: usize) -> Result<Vec<f64>> {
        self.check_inputs(t, slice)?;
        Ok(self.embed(t, slice).3)
    }

    fn embed(&self, t: usize, slice: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (e, c4) = (self.cfg.embed_dim, 4 * self.cfg.channels);
        let o = self.off;
        let e0 = self.time_slice_code(t, slice);
        let z1 = linear_forward(self.p(o.lin1_w, e * e), self.p(o.lin1_b, e), &e0);
        let s1: Vec<f64> = z1.iter().map(|&z| silu(z)).collect();
        let film = linear_forward(self.p(o.lin2_w, c4 * e), self.p(o.lin2_b, c4), &s1);
        (e0, z1, s1, film)
    }

    /// `conv_a` output and the anatomy part of the skip path for one slice.
    fn anatomy_terms(&self, anat: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let (c, nz, hw) = (self.cfg.channels, self.cfg.n_slices, h * w);
        let o = self.off;
        let mut ca = vec![0.0; c * hw];
        conv_forward(&ConvShape { cin: nz, cout: c, k: 1, dil: 1, h, w }, anat, self.p(o.conva_w, c * nz), &mut ca);
        let mut sk = vec![0.0; 2 * hw];
        let skw = self.p(o.skip_w, 2 * (1 + nz));
        for oc in 0..2 {
            for j in 0..nz {
                let wv = skw[oc * (1 + nz) + 1 + j];
                let src = &anat[j * hw..(j + 1) * hw];
                sk[oc * hw..(oc + 1) * hw].iter_mut().zip(src).for_each(|(a, b)| *a += wv * b);
            }
        }
        (ca, sk)
    }

    fn check_slice_len(&self, x: &[f64], anat: &[f64], h: usize, w: usize) -> Result<()> {
        if x.len() != h * w || anat.len() != self.cfg.n_slices * h * w {
            return Err(Error::shape(format!(
                "expected a {h}x{w} slice and {} anatomy channels, got {} and {} values",
                self.cfg.n_slices,
                x.len(),
                anat.len()
            )));
        }
        Ok(())
    }

    /// Forward pass on one slice. `anat` holds the depth-weighted anatomy
    /// channels from [`ConditionStack::channels`].
    pub fn forward(&self, x: &[f64], anat: &[f64], h: usize, w: usize, t: usize, slice: usize) -> Result<(DenoiserOutput, ForwardCache)> {
        self.check_inputs(t, slice)?;
        self.check_slice_len(x, anat, h, w)?;
        let (ca, sk) = self.anatomy_terms(anat, h, w);
        let (out, mut cache) = self.forward_core(x, &ca, &sk, h, w, t, slice)?;
        cache.anat = Some(anat.to_vec());
        Ok((out, cache))
    }

    fn forward_core(
        &self,
        x: &[f64],
        ca: &[f64],
        sk: &[f64],
        h: usize,
        w: usize,
        t: usize,
        slice: usize,
    ) -> Result<(DenoiserOutput, ForwardCache)> {
        let (c, nz, hw) = (self.cfg.channels, self.cfg.n_slices, h * w);
        let o = self.off;
        let (cin, k, mu) = self.precond(t);
        let xs: Vec<f64> = x.iter().map(|v| v * cin).collect();
        let (e0, z1, s1, film) = self.embed(t, slice);
        let (g1, b1, g2, b2) = (&film[0..c], &film[c..2 * c], &film[2 * c..3 * c], &film[3 * c..4 * c]);

        let mut a1 = ca.to_vec();
        conv_forward(&ConvShape { cin: 1, cout: c, k: 3, dil: 1, h, w }, &xs, self.p(o.convx_w, 9 * c), &mut a1);
        add_bias(&mut a1, self.p(o.convx_b, c), hw);
        let mut p1 = a1.clone();
        for ch in 0..c {
            p1[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = *v * (1.0 + g1[ch]) + b1[ch]);
        }
        let h1: Vec<f64> = p1.iter().map(|&z| silu(z)).collect();

        let mut a2 = vec![0.0; c * hw];
        conv_forward(&ConvShape { cin: c, cout: c, k: 3, dil: 2, h, w }, &h1, self.p(o.conv2_w, 9 * c * c), &mut a2);
        add_bias(&mut a2, self.p(o.conv2_b, c), hw);
        let mut p2 = a2.clone();
        for ch in 0..c {
            p2[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = *v * (1.0 + g2[ch]) + b2[ch]);
        }
        let h2: Vec<f64> = p2.iter().map(|&z| silu(z)).collect();

        let mut out = sk.to_vec();
        conv_forward(&ConvShape { cin: c, cout: 2, k: 3, dil: 1, h, w }, &h2, self.p(o.conv3_w, 18 * c), &mut out);
        add_bias(&mut out, self.p(o.conv3_b, 2), hw);
        let skw = self.p(o.skip_w, 2 * (1 + nz));
        for oc in 0..2 {
            let wv = skw[oc * (1 + nz)];
            out[oc * hw..(oc + 1) * hw].iter_mut().zip(&xs).for_each(|(a, b)| *a += wv * b);
        }
        let gate = self.params[o.gate];
        let base: Vec<f64> = x.iter().map(|xi| k * (xi - mu)).collect();
        let eps_hat: Vec<f64> = out[..hw].iter().zip(&base).map(|(a, b)| a + gate * b).collect();
        let out1 = out[hw..].to_vec();
        let v: Vec<f64> = out1.iter().map(|&z| sigmoid(z)).collect();

        if !eps_hat.iter().chain(&v).all(|z| z.is_finite()) {
            let layers: [(&str, &[f64]); 6] =
                [("input", x), ("embedding", &film), ("h1", &h1), ("h2", &h2), ("out", &out), ("eps", &eps_hat)];
            let bad = layers.iter().find(|(_, d)| !d.iter().all(|z| z.is_finite())).map(|(n, _)| *n).unwrap_or("v");
            return Err(Error::Numerical(format!("non-finite activation first seen in {bad} (t={t}, slice={slice})")));
        }

        let cache = ForwardCache { h, w, t, xs, anat: None, e0, z1, s1, film, a1, p1, h1, a2, p2, h2, out1, base };
        Ok((DenoiserOutput { eps_hat, v }, cache))
    }

    /// Backward pass. Parameter gradients are accumulated into `grads`
    /// when given; returns `d loss / d x_t`.
    ///
    /// Anatomy-dependent weights only receive gradients when the cache came
    /// from [`forward`](Self::forward).
    pub fn backward(&self, cache: &ForwardCache, d_eps: &[f64], d_v: &[f64], grads: Option<&mut [f64]>) -> Vec<f64> {
        let (c, nz) = (self.cfg.channels, self.cfg.n_slices);
        let (h, w) = (cache.h, cache.w);
        let hw = h * w;
        let o = self.off;
        let mut scratch;
        let gr: &mut [f64] = match grads {
            Some(g) => g,
            None => {
                scratch = vec![0.0; o.total];
                &mut scratch
            }
        };
        let (cin, k, _) = self.precond(cache.t);
        let gate = self.params[o.gate];

        gr[o.gate] += d_eps.iter().zip(&cache.base).map(|(a, b)| a * b).sum::<f64>();
        let mut dx: Vec<f64> = d_eps.iter().map(|g| gate * k * g).collect();

        let mut gout = Vec::with_capacity(2 * hw);
        gout.extend_from_slice(d_eps);
        gout.extend(d_v.iter().zip(&cache.out1).map(|(g, &z)| {
            let s = sigmoid(z);
            g * s * (1.0 - s)
        }));

        // skip path
        let mut dxs = vec![0.0; hw];
        {
            let skw_start = o.skip_w;
            for oc in 0..2 {
                let g = &gout[oc * hw..(oc + 1) * hw];
                let wv = self.params[skw_start + oc * (1 + nz)];
                gr[skw_start + oc * (1 + nz)] += g.iter().zip(&cache.xs).map(|(a, b)| a * b).sum::<f64>();
                dxs.iter_mut().zip(g).for_each(|(a, b)| *a += wv * b);
                if let Some(anat) = &cache.anat {
                    for j in 0..nz {
                        gr[skw_start + oc * (1 + nz) + 1 + j] += g.iter().zip(&anat[j * hw..(j + 1) * hw]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }

        bias_grad(&gout, &mut gr[o.conv3_b..o.conv3_b + 2], hw);
        let mut dh2 = vec![0.0; c * hw];
        let s3 = ConvShape { cin: c, cout: 2, k: 3, dil: 1, h, w };
        conv_backward(&s3, &cache.h2, self.p(o.conv3_w, 18 * c), &gout, &mut gr[o.conv3_w..o.conv3_w + 18 * c], Some(&mut dh2));

        let mut dfilm = vec![0.0; 4 * c];
        let film = &cache.film;
        let mut dp2 = vec![0.0; c * hw];
        for ch in 0..c {
            let r = ch * hw..(ch + 1) * hw;
            let (mut dg, mut db) = (0.0, 0.0);
            for i in r {
                let d = dh2[i] * silu_grad(cache.p2[i]);
                dg += d * cache.a2[i];
                db += d;
                dp2[i] = d * (1.0 + film[2 * c + ch]);
            }
            dfilm[2 * c + ch] += dg;
            dfilm[3 * c + ch] += db;
        }
        bias_grad(&dp2, &mut gr[o.conv2_b..o.conv2_b + c], hw);
        let mut dh1 = vec![0.0; c * hw];
        let s2 = ConvShape { cin: c, cout: c, k: 3, dil: 2, h, w };
        conv_backward(&s2, &cache.h1, self.p(o.conv2_w, 9 * c * c), &dp2, &mut gr[o.conv2_w..o.conv2_w + 9 * c * c], Some(&mut dh1));

        let mut dp1 = vec![0.0; c * hw];
        for ch in 0..c {
            let (mut dg, mut db) = (0.0, 0.0);
            for i in ch * hw..(ch + 1) * hw {
                let d = dh1[i] * silu_grad(cache.p1[i]);
                dg += d * cache.a1[i];
                db += d;
                dp1[i] = d * (1.0 + film[ch]);
            }
            dfilm[ch] += dg;
            dfilm[c + ch] += db;
        }
        bias_grad(&dp1, &mut gr[o.convx_b..o.convx_b + c], hw);
        let sx = ConvShape { cin: 1, cout: c, k: 3, dil: 1, h, w };
        conv_backward(&sx, &cache.xs, self.p(o.convx_w, 9 * c), &dp1, &mut gr[o.convx_w..o.convx_w + 9 * c], Some(&mut dxs));
        if let Some(anat) = &cache.anat {
            let sa = ConvShape { cin: nz, cout: c, k: 1, dil: 1, h, w };
            conv_backward(&sa, anat, self.p(o.conva_w, c * nz), &dp1, &mut gr[o.conva_w..o.conva_w + c * nz], None);
        }

        let e = self.cfg.embed_dim;
        let (lw2, lb2) = gr[o.lin2_w..o.lin2_b + 4 * c].split_at_mut(4 * c * e);
        let ds1 = linear_backward(self.p(o.lin2_w, 4 * c * e), &cache.s1, &dfilm, lw2, lb2);
        let dz1: Vec<f64> = ds1.iter().zip(&cache.z1).map(|(g, &z)| g * silu_grad(z)).collect();
        let (lw1, lb1) = gr[o.lin1_w..o.lin1_b + e].split_at_mut(e * e);
        linear_backward(self.p(o.lin1_w, e * e), &cache.e0, &dz1, lw1, lb1);

        dx.iter_mut().zip(&dxs).for_each(|(a, b)| *a += cin * b);
        dx
    }
}

/// One forward pass on slice `slice` of an anatomy volume.
pub fn net_forward(x_t: &[f64], t: usize, slice: usize, anatomy: &ImageVolume, net: &TinyEpsNet) -> Result<DenoiserOutput> {
    let stack = ConditionStack::new(anatomy, slice)?;
    let [nx, ny, _] = anatomy.grid.dims;
    Ok(net.forward(x_t, &stack.channels(), ny, nx, t, slice)?.0)
}

/// A network bound to one anatomy volume, with the anatomy-only terms of
/// every slice precomputed.
pub struct ConditionedNet<'a> {
    net: &'a TinyEpsNet,
    h: usize,
    w: usize,
    per_slice: Vec<(Vec<f64>, Vec<f64>)>,
}

impl<'a> ConditionedNet<'a> {
    pub fn new(net: &'a TinyEpsNet, anatomy: &ImageVolume) -> Result<Self> {
        let [nx, ny, nz] = anatomy.grid.dims;
        if nz != net.cfg.n_slices {
            return Err(Error::shape(format!("anatomy has {nz} slices, network expects {}", net.cfg.n_slices)));
        }
        let per_slice = (0..nz)
            .into_par_iter()
            .map(|i| {
                let ch = ConditionStack { anatomy, slice: i }.channels();
                net.anatomy_terms(&ch, ny, nx)
            })
            .collect();
        Ok(Self { net, h: ny, w: nx, per_slice })
    }

    fn run(&self, x_t: &[f64], t: usize, slice: usize) -> Result<(DenoiserOutput, ForwardCache)> {
        self.net.check_inputs(t, slice)?;
        if x_t.len() != self.h * self.w {
            return Err(Error::shape(format!("slice has {} values, expected {}", x_t.len(), self.h * self.w)));
        }
        let (ca, sk) = &self.per_slice[slice];
        self.net.forward_core(x_t, ca, sk, self.h, self.w, t, slice)
    }
}

impl Denoiser for ConditionedNet<'_> {
    fn predict(&self, x_t: &[f64], t: usize, slice: usize) -> Result<DenoiserOutput> {
        Ok(self.run(x_t, t, slice)?.0)
    }

    fn eps_vjp(&self, x_t: &[f64], t: usize, slice: usize, upstream: &[f64]) -> Result<Vec<f64>> {
        let (_, cache) = self.run(x_t, t, slice)?;
        if upstream.len() != x_t.len() {
            return Err(Error::shape("vjp upstream length mismatch"));
        }
        Ok(self.net.backward(&cache, upstream, &vec![0.0; upstream.len()], None))
    }
}
