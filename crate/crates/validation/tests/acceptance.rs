//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary so the lines are always printed.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spectdiff_cli::commands::{cmd_simulate, cmd_sweep, cmd_train};
use spectdiff_cli::{PriorKind, RunConfig, SweepArgs};
use spectdiff_core::denoiser::gmm::{GmmDenoiser, GmmPrior};
use spectdiff_core::denoiser::net::{ConditionStack, DataStats, NetConfig, TinyEpsNet};
use spectdiff_core::diffusion::{mu_theta, posterior_mean, predict_x0, q_sample, sigma_theta, NoiseSchedule};
use spectdiff_core::geometry::build_default_geometry;
use spectdiff_core::phantom::{make_phantom, simulate_counts, thin_counts, CountLevel, PhantomSpec};
use spectdiff_core::pipeline::{estimate_kappa, fit_slice_priors, guided_reconstruct, training_volume, Condition, Scanner};
use spectdiff_core::recon::{mlem_reconstruct, mlem_update, poisson_loglik, tv_z_prox, MlemState};
use spectdiff_core::sampler::{lambda_dps_of, lambda_mlem_of, sample_volume, GuidanceConfig, Lambda, SamplerRun, Solver, ValueMap};
use spectdiff_core::{ImageVolume, VoxelGrid};

type Outcome = (bool, String);

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn desk_scanner(conds: &[Condition]) -> Scanner {
    let mut s = Scanner::new(build_default_geometry(1.0).unwrap(), &VoxelGrid::desk_default()).unwrap();
    s.prepare(conds).unwrap();
    s
}

fn view_presets() -> Vec<Condition> {
    [1, 3, 5, 7, 9].map(Condition::Views).to_vec()
}

fn adjoint() -> Outcome {
    let scanner = desk_scanner(&view_presets());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut conds = vec![Condition::Count(1.0)];
    conds.extend(view_presets());
    for c in &conds {
        let s = scanner.matrix(c).unwrap();
        for _ in 0..100 {
            let x = ImageVolume::from_vec(s.grid(), (0..s.n_cols()).map(|_| rng.random::<f64>()).collect()).unwrap();
            let mut y = s.empty_projection();
            y.data.iter_mut().for_each(|v| *v = rng.random::<f64>());
            let lhs: f64 = s.forward_project(&x).unwrap().data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
            let rhs = x.dot(&s.back_project(&y).unwrap());
            worst = worst.max(rel(lhs, rhs));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (worst < 1e-10 && secs < 10.0, format!("max rel error {worst:.2e} over 600 pairs in {secs:.2} s"))
}

fn mlem_monotone() -> Outcome {
    let conds = Condition::defaults();
    let scanner = desk_scanner(&conds);
    let mut worst_drop: f64 = 0.0;
    for (k, c) in conds.iter().enumerate() {
        let (act, _) = make_phantom(&PhantomSpec::random(100 + k as u64), &scanner.full.grid().clone()).unwrap();
        let y_full = simulate_counts(&scanner.full, &act, 1_000_000, k as u64).unwrap();
        let y = scanner.degrade(&y_full, c, 7 + k as u64).unwrap();
        let s = scanner.matrix(c).unwrap();
        let mut state = MlemState::new(s, &y, None).unwrap();
        let mut prev = poisson_loglik(s, &state.current, &y).unwrap();
        for _ in 0..50 {
            state = mlem_update(&state, &y, s).unwrap();
            let l = poisson_loglik(s, &state.current, &y).unwrap();
            worst_drop = worst_drop.max((prev - l) / prev.abs());
            prev = l;
        }
    }
    // a noiseless consistent input is a fixed point
    let s = &scanner.full;
    let (act, _) = make_phantom(&PhantomSpec::default(), s.grid()).unwrap();
    let sens = s.sensitivity();
    let x = ImageVolume::from_vec(s.grid(), act.data.iter().zip(&sens.data).map(|(&a, &w)| if w > 0.0 { a + 0.1 } else { 0.0 }).collect())
        .unwrap();
    let y = s.forward_project(&x).unwrap();
    let out = mlem_reconstruct(s, &y, 1, Some(&x)).unwrap();
    let moved = out.data.iter().zip(&x.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / x.max();
    (
        worst_drop < 1e-9 && moved < 1e-9,
        format!("largest relative drop {worst_drop:.2e} over 10 datasets x 50 iterations; fixed point moved {moved:.2e}"),
    )
}

fn diffusion_algebra() -> Outcome {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = rng.random_range(1..=sched.t_max());
        let x_t: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let eps: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let a = mu_theta(&x_t, &eps, t, &sched).unwrap();
        let b = posterior_mean(&x_t, &predict_x0(&x_t, &eps, t, &sched).unwrap(), t, &sched).unwrap();
        for (u, v) in a.iter().zip(&b) {
            worst = worst.max((u - v).abs() / u.abs().max(1.0));
        }
    }
    let (x0, t, n) = (1.5, 300, 10_000);
    let mut acc = (0.0, 0.0);
    for _ in 0..n {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let prev = q_sample(&[x0], t - 1, &[e1], &sched).unwrap()[0];
        let x = sched.alpha(t).sqrt() * prev + sched.beta(t).sqrt() * e2;
        acc.0 += x;
        acc.1 += x * x;
    }
    let mean = acc.0 / n as f64;
    let var = acc.1 / n as f64 - mean * mean;
    let ab = sched.alpha_bar(t);
    let (dm, dv) = (rel(mean, ab.sqrt() * x0), rel(var, 1.0 - ab));
    let mut endpoint: f64 = 0.0;
    for t in [2, 10, 500, sched.t_max()] {
        endpoint = endpoint.max(rel(sigma_theta(0.0, t, &sched).unwrap().powi(2), sched.beta_tilde(t)));
        endpoint = endpoint.max(rel(sigma_theta(1.0, t, &sched).unwrap().powi(2), sched.beta(t)));
    }
    (
        worst < 1e-10 && dm < 0.05 && dv < 0.05 && endpoint < 1e-12,
        format!("mean forms {worst:.1e}; composed mean {dm:.3} var {dv:.3}; endpoints {endpoint:.1e}"),
    )
}

fn gaussian_oracle() -> Outcome {
    let sched = NoiseSchedule::default();
    let grid = VoxelGrid::centered([100, 100, 1], [1.0; 3]).unwrap();
    let (mu, var) = (2.0, 0.25);
    let den = GmmDenoiser::new(GmmPrior::gaussian(vec![mu; grid.slice_len()], var).unwrap(), sched.clone());
    let x_in = ImageVolume::filled(&grid, mu);
    let run = SamplerRun { x_in: &x_in, data: None, model: &den, sched: &sched, units: ValueMap::IDENTITY, seed: 4 };
    let base = GuidanceConfig { xin_start: false, ..GuidanceConfig::unguided() };
    let var_of = |v: &ImageVolume| v.data.iter().map(|x| (x - v.mean()).powi(2)).sum::<f64>() / v.len() as f64;
    let start = Instant::now();
    let heun = sample_volume(&run, &GuidanceConfig { solver: Solver::Heun, ..base.clone() }).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ddim = sample_volume(&run, &base).unwrap();
    let (dm, dv) = (rel(heun.mean(), mu), rel(var_of(&heun), var));
    (
        dm < 0.01 && dv < 0.05 && secs < 60.0,
        format!(
            "25 steps, 1e4 trajectories, second-order: mean {dm:.4} var {dv:.4} in {secs:.1} s; first-order DDIM var ratio {:.3}",
            var_of(&ddim) / var
        ),
    )
}

/// Standard phantom at 5% counts with per-slice Gaussian priors fitted to
/// random training phantoms.
struct GuidedSetup {
    scanner: Scanner,
    den: GmmDenoiser,
    kappa: f64,
    y: spectdiff_core::ProjectionData,
    x_in: ImageVolume,
    guidance: GuidanceConfig,
}

fn guided_setup() -> GuidedSetup {
    let scanner = desk_scanner(&[]);
    let grid = scanner.full.grid().clone();
    let sens = scanner.full.sensitivity();
    let truths: Vec<_> = (0..8).map(|k| make_phantom(&PhantomSpec::random(1000 + k), &grid).unwrap()).collect();
    let kappa = estimate_kappa(&truths.iter().map(|t| t.0.clone()).collect::<Vec<_>>(), &sens).unwrap();
    let data: Vec<_> = truths.iter().map(|(a, b)| training_volume(a, b, &sens, kappa).unwrap()).collect();
    let sched = NoiseSchedule::default();
    let den = GmmDenoiser::per_slice(fit_slice_priors(&data).unwrap(), sched).unwrap();
    let (act, _) = make_phantom(&PhantomSpec::default(), &grid).unwrap();
    let y_full = simulate_counts(&scanner.full, &act, 1_000_000, 3).unwrap();
    let y = thin_counts(&y_full, CountLevel::new(0.05).unwrap(), 4).unwrap();
    let x_in = mlem_reconstruct(&scanner.full, &y, 50, None).unwrap();
    let guidance = GuidanceConfig { count_level: CountLevel::new(0.05).unwrap(), ..RunConfig::default().guidance };
    GuidedSetup { scanner, den, kappa, y, x_in, guidance }
}

impl GuidedSetup {
    fn run(&self, cfg: &GuidanceConfig) -> (ImageVolume, spectdiff_core::sampler::SampleDiagnostics) {
        let sched = NoiseSchedule::default();
        guided_reconstruct(&self.den, &sched, self.kappa, &self.scanner.full, &self.y, &self.x_in, cfg, 21).unwrap()
    }
}

fn guidance_limits(setup: &GuidedSetup) -> Outcome {
    let dist: Vec<f64> = [0.0, 0.1, 1.0, 10.0, 1000.0]
        .iter()
        .map(|&l| {
            let cfg = GuidanceConfig { lambda_dps: Lambda::Value(l), ..setup.guidance.clone() };
            let (out, _) = setup.run(&cfg);
            let d: f64 = out.data.iter().zip(&setup.x_in.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            d / setup.x_in.norm()
        })
        .collect();
    let ok = dist.windows(2).all(|w| w[1] < w[0]);
    (ok, format!("relative distance to input {:?}", dist.iter().map(|d| format!("{d:.4}")).collect::<Vec<_>>()))
}

fn lambda_schedules() -> Outcome {
    let direct = |c: f64| 0.1559 * (-4.8120 * c).exp() + 0.0079 * (3.6508 * c).exp();
    let exact = lambda_dps_of(1.0).unwrap() == 0.3454;
    let e1 = (lambda_mlem_of(0.01).unwrap() - direct(0.01)).abs();
    let e2 = (lambda_mlem_of(1.0).unwrap() - direct(1.0)).abs();
    let cs: Vec<f64> = (0..100).map(|i| 0.01 + 0.99 * i as f64 / 99.0).collect();
    let ratio: Vec<f64> = cs.iter().map(|&c| lambda_mlem_of(c).unwrap() / lambda_dps_of(c).unwrap()).collect();
    let turn = ratio.windows(2).position(|w| w[1] >= w[0]);
    let trend = match turn {
        None => "ratio strictly decreasing".to_string(),
        Some(i) => {
            format!("ratio falls from {:.3} to {:.3} at C = {:.2}, then rises to {:.3} at C = 1", ratio[0], ratio[i], cs[i], ratio[99])
        }
    };
    (exact && e1 <= 1e-12 && e2 <= 1e-12 && turn.is_none(), format!("dps(1) exact {exact}; mlem errors {e1:.1e} {e2:.1e}; {trend}"))
}

fn taut_string(y: &[f64], lambda: f64) -> Vec<f64> {
    // Condat's direct algorithm
    let n = y.len();
    let mut x = vec![0.0; n];
    let (mut k, mut k0, mut kplus, mut kminus) = (0usize, 0usize, 0usize, 0usize);
    let (mut vmin, mut vmax) = (y[0] - lambda, y[0] + lambda);
    let (mut umin, mut umax) = (lambda, -lambda);
    let fill = |x: &mut [f64], k0: &mut usize, upto: usize, v: f64| loop {
        x[*k0] = v;
        *k0 += 1;
        if *k0 > upto {
            break;
        }
    };
    loop {
        while k == n - 1 {
            if umin < 0.0 {
                fill(&mut x, &mut k0, kminus, vmin);
                k = k0;
                kminus = k;
                vmin = y[k];
                umin = lambda;
                umax = vmin + umin - vmax;
            } else if umax > 0.0 {
                fill(&mut x, &mut k0, kplus, vmax);
                k = k0;
                kplus = k;
                vmax = y[k];
                umax = -lambda;
                umin = vmax + umax - vmin;
            } else {
                vmin += umin / (k - k0 + 1) as f64;
                fill(&mut x, &mut k0, k, vmin);
                return x;
            }
        }
        umin += y[k + 1] - vmin;
        if umin < -lambda {
            fill(&mut x, &mut k0, kminus, vmin);
            k = k0;
            (kminus, kplus) = (k, k);
            vmin = y[k];
            vmax = vmin + 2.0 * lambda;
            (umin, umax) = (lambda, -lambda);
            continue;
        }
        umax += y[k + 1] - vmax;
        if umax > lambda {
            fill(&mut x, &mut k0, kplus, vmax);
            k = k0;
            (kminus, kplus) = (k, k);
            vmax = y[k];
            vmin = vmax - 2.0 * lambda;
            (umin, umax) = (lambda, -lambda);
        } else {
            k += 1;
            if umin >= lambda {
                kminus = k;
                vmin += (umin - lambda) / (k - k0 + 1) as f64;
                umin = lambda;
            }
            if umax <= -lambda {
                kplus = k;
                vmax += (umax + lambda) / (k - k0 + 1) as f64;
                umax = -lambda;
            }
        }
    }
}

fn tv_behaviour(setup: &GuidedSetup) -> Outcome {
    let (_, diag) = setup.run(&setup.guidance);
    let steps = diag.tv_steps.len();
    let rises = diag.tv_steps.iter().filter(|(before, after)| after > before).count();

    let nz = 24;
    let grid = VoxelGrid::centered([4, 5, nz], [1.0; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = ImageVolume::from_vec(&grid, (0..grid.len()).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
    let weight = 0.3;
    let p = tv_z_prox(&x, weight, 100).unwrap();
    let mut worst: f64 = 0.0;
    for col in 0..20 {
        let (ix, iy) = (col % 4, col / 4);
        let want = taut_string(&(0..nz).map(|z| x.get(ix, iy, z)).collect::<Vec<_>>(), weight);
        for (z, w) in want.iter().enumerate() {
            worst = worst.max((p.get(ix, iy, z) - w).abs());
        }
    }
    (
        steps > 0 && rises == 0 && worst < 1e-3,
        format!("{rises} of {steps} sampler TV steps raised tv_z; prox vs taut string max error {worst:.1e}"),
    )
}

fn gradient_checks() -> Outcome {
    let cfg = NetConfig::new(4, 3, 8).unwrap();
    let mut net = TinyEpsNet::init(cfg, NoiseSchedule::default(), DataStats { mean: -0.3, std: 0.6 }, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // move every weight off its initial value so no path is trivially closed
    for p in net.params_mut() {
        *p += 0.05 * rng.sample::<f64, _>(StandardNormal);
    }
    let (w, h) = (6, 5);
    let grid = VoxelGrid::centered([w, h, 4], [1.0; 3]).unwrap();
    let anat = ImageVolume::from_vec(&grid, (0..grid.len()).map(|_| 0.5 + 0.2 * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap();
    let base = net.params().as_ptr() as usize;
    let tensors: Vec<(&str, usize, usize)> =
        net.tensors().iter().map(|(name, _, s)| (*name, (s.as_ptr() as usize - base) / std::mem::size_of::<f64>(), s.len())).collect();

    let normal = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>();
    let hstep = 1e-6;
    let err = |fd: f64, g: f64| (fd - g).abs() / fd.abs().max(g.abs()).max(1e-4);
    let (mut worst_param, mut worst_input): (f64, f64) = (0.0, 0.0);
    let mut worst_layer = "";
    for probe in 0..100 {
        let slice = probe % 4;
        let t = rng.random_range(1..=1000);
        let anat_ch = ConditionStack::new(&anat, slice).unwrap().channels();
        let (x, u, r) = (normal(&mut rng, h * w), normal(&mut rng, h * w), normal(&mut rng, h * w));
        let loss = |net: &TinyEpsNet, x: &[f64]| {
            let (out, _) = net.forward(x, &anat_ch, h, w, t, slice).unwrap();
            out.eps_hat.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() + out.v.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = net.forward(&x, &anat_ch, h, w, t, slice).unwrap();
        let mut g = vec![0.0; net.n_params()];
        let dx = net.backward(&cache, &u, &r, Some(&mut g));

        let (name, off, len) = tensors[probe % tensors.len()];
        let k = off + rng.random_range(0..len);
        let orig = net.params()[k];
        net.params_mut()[k] = orig + hstep;
        let lp = loss(&net, &x);
        net.params_mut()[k] = orig - hstep;
        let lm = loss(&net, &x);
        net.params_mut()[k] = orig;
        let e = err((lp - lm) / (2.0 * hstep), g[k]);
        if e > worst_param {
            (worst_param, worst_layer) = (e, name);
        }

        let i = rng.random_range(0..h * w);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += hstep;
        xm[i] -= hstep;
        worst_input = worst_input.max(err((loss(&net, &xp) - loss(&net, &xm)) / (2.0 * hstep), dx[i]));
    }
    (
        worst_param < 1e-4 && worst_input < 1e-4,
        format!("100 probes over {} tensors: parameter {worst_param:.1e} (worst in {worst_layer}), input {worst_input:.1e}", tensors.len()),
    )
}

fn desk_sweep(work: &Path) -> (f64, BTreeMap<String, f64>) {
    let mut cfg = RunConfig::default();
    cfg.set("sim.conditions", "count_1pct,count_5pct,count_10pct,views_5,views_7,views_9").unwrap();
    cfg.set("sweep.ablation_conditions", "count_5pct").unwrap();
    let data = work.join("data");
    cmd_simulate(&cfg, &data, true).unwrap();
    let start = Instant::now();
    cmd_train(&cfg, &data, &work.join("model"), true, None).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let args = SweepArgs { data, prior: PriorKind::Net, checkpoint: Some(work.join("model/model.spnn")) };
    let s = cmd_sweep(&cfg, &args, &work.join("sweep"), true).unwrap();
    assert!(s.failures.is_empty(), "{:?}", s.failures);
    (train_secs, s.report.rows.iter().map(|r| (r.label.clone(), r.psnr)).collect())
}

fn improvement(train_secs: f64, psnr: &BTreeMap<String, f64>) -> Outcome {
    let mut ok = train_secs <= 1800.0;
    let mut parts = vec![format!("training {train_secs:.0} s")];
    for (cond, need) in
        [("count_1pct", 2.0), ("count_5pct", 2.0), ("count_10pct", 2.0), ("views_5", 0.5), ("views_7", 0.5), ("views_9", 0.5)]
    {
        let gain = psnr[&format!("{cond}/proposed")] - psnr[&format!("{cond}/input")];
        ok &= gain >= need;
        parts.push(format!("{cond} {:.2} -> {:.2} ({gain:+.2} dB)", psnr[&format!("{cond}/input")], psnr[&format!("{cond}/proposed")]));
    }
    (ok, parts.join("; "))
}

fn ablation(psnr: &BTreeMap<String, f64>) -> Outcome {
    let full = psnr["count_5pct/proposed"];
    let mut ok = true;
    let mut parts = vec![format!("proposed {full:.2}")];
    for v in ["no_xin_start", "no_dps", "no_tv", "no_mlem"] {
        let p = psnr[&format!("count_5pct/{v}")];
        ok &= full >= p - 0.1;
        parts.push(format!("{v} {p:.2}"));
    }
    (ok, parts.join("; "))
}

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(work: &Path) -> Outcome {
    let cfg = RunConfig::from_text(
        "sim.phantoms=3\nsim.train_phantoms=3\nsim.mlem_iters=10\nsim.conditions=count_5pct,views_7\n\
         sweep.ablation_conditions=count_5pct\nnet.channels=4\nnet.embed_dim=8\ntrain.steps=6\ntrain.batch_size=2\n\
         guidance.ddim_steps=5\nguidance.mlem_every=2\nseed=5\n",
    )
    .unwrap();
    let data = work.join("data");
    cmd_simulate(&cfg, &data, true).unwrap();
    cmd_train(&cfg, &data, &work.join("model"), true, None).unwrap();
    let args = SweepArgs { data: data.clone(), prior: PriorKind::Net, checkpoint: Some(work.join("model/model.spnn")) };
    let mut trees = Vec::new();
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let out = work.join(format!("sweep{threads}"));
        pool.install(|| cmd_sweep(&cfg, &args, &out, true)).unwrap();
        trees.push(tree_bytes(&out));
    }
    let files = trees[0].len();
    let differing: Vec<_> = trees[0].iter().filter(|(k, v)| trees[1].get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let same_set = trees[0].keys().eq(trees[1].keys());
    (same_set && differing.is_empty() && files > 0, format!("{files} files compared at 1 and 3 threads; {} differ", differing.len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        (false, format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() -> ExitCode {
    // test listing and name filters from other targets should not start the suite
    if std::env::args().skip(1).any(|a| a == "--list" || !a.starts_with('-')) {
        return ExitCode::SUCCESS;
    }
    let work = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n:>2} {}: {}", if o.0 { "PASS" } else { "FAIL" }, o.1);
        results.push((n, o));
    };
    report(1, guarded(adjoint));
    report(2, guarded(mlem_monotone));
    report(3, guarded(diffusion_algebra));
    report(4, guarded(gaussian_oracle));
    let setup = catch_unwind(guided_setup).ok();
    match &setup {
        Some(s) => {
            report(5, guarded(|| guidance_limits(s)));
            report(6, guarded(lambda_schedules));
            report(7, guarded(|| tv_behaviour(s)));
        }
        None => {
            report(5, (false, "setup failed".into()));
            report(6, guarded(lambda_schedules));
            report(7, (false, "setup failed".into()));
        }
    }
    report(8, guarded(gradient_checks));
    match catch_unwind(AssertUnwindSafe(|| desk_sweep(&work.path().join("desk")))) {
        Ok((secs, psnr)) => {
            report(9, guarded(|| improvement(secs, &psnr)));
            report(10, guarded(|| ablation(&psnr)));
        }
        Err(_) => {
            report(9, (false, "desk sweep failed".into()));
            report(10, (false, "desk sweep failed".into()));
        }
    }
    report(11, guarded(|| determinism(&work.path().join("det"))));
    let failed: Vec<_> = results.iter().filter(|(_, o)| !o.0).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria pass", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
