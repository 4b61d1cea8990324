//! Reference implementations checked against the library: a dense
//! projector, an exact 1D TV solver, and the diffusion identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use spectdiff_core::diffusion::{mu_theta, posterior_mean, predict_x0, q_sample, sigma_theta, NoiseSchedule};
use spectdiff_core::geometry::build_geometry;
use spectdiff_core::phantom::{expected_counts, make_phantom, simulate_counts, PhantomSpec};
use spectdiff_core::recon::{mlem_reconstruct, mlem_update, poisson_loglik, tv_z, tv_z_prox, MlemState};
use spectdiff_core::sysmat::build_system_matrix;
use spectdiff_core::{ImageVolume, ProjectionData, SystemMatrix, VoxelGrid};

fn small_matrix() -> SystemMatrix {
    let grid = VoxelGrid::centered([8, 8, 4], [4.0; 3]).unwrap();
    build_system_matrix(&build_geometry(1.0, 6).unwrap(), &grid).unwrap()
}

fn dense(s: &SystemMatrix) -> Vec<Vec<f64>> {
    (0..s.n_rows())
        .map(|k| {
            let mut row = vec![0.0; s.n_cols()];
            let (idx, val) = s.row(k);
            for (&j, &v) in idx.iter().zip(val) {
                row[j as usize] += v;
            }
            row
        })
        .collect()
}

#[test]
fn sparse_projector_matches_dense_products() {
    let s = small_matrix();
    let d = dense(&s);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = ImageVolume::from_vec(s.grid(), (0..s.n_cols()).map(|_| rng.random::<f64>()).collect()).unwrap();
    let mut y = s.empty_projection();
    y.data.iter_mut().for_each(|v| *v = rng.random::<f64>());

    let fwd = s.forward_project(&x).unwrap();
    for (k, row) in d.iter().enumerate() {
        let want: f64 = row.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((fwd.data[k] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
    let back = s.back_project(&y).unwrap();
    for j in 0..s.n_cols() {
        let want: f64 = d.iter().zip(&y.data).map(|(row, v)| row[j] * v).sum();
        assert!((back.data[j] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
    // column view agrees with the row view
    for j in (0..s.n_cols()).step_by(37) {
        let (rows, vals) = s.column(j);
        for (&k, &v) in rows.iter().zip(vals) {
            assert_eq!(d[k as usize][j], v);
        }
    }
}

/// Exact minimiser of `1/2 |x - y|^2 + lambda sum |x[k+1] - x[k]|`
/// (Condat's direct algorithm).
fn taut_string(y: &[f64], lambda: f64) -> Vec<f64> {
    let n = y.len();
    let mut x = vec![0.0; n];
    if n == 0 {
        return x;
    }
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
            kminus = k;
            kplus = k;
            vmin = y[k];
            vmax = vmin + 2.0 * lambda;
            umin = lambda;
            umax = -lambda;
            continue;
        }
        umax += y[k + 1] - vmax;
        if umax > lambda {
            fill(&mut x, &mut k0, kplus, vmax);
            k = k0;
            kminus = k;
            kplus = k;
            vmax = y[k];
            vmin = vmax - 2.0 * lambda;
            umin = lambda;
            umax = -lambda;
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

fn tv_objective(x: &[f64], y: &[f64], lambda: f64) -> f64 {
    0.5 * x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + lambda * x.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>()
}

#[test]
fn taut_string_reference_is_optimal_on_small_cases() {
    // brute force over a fine grid for a three-point signal
    let y = [0.0, 1.0, 0.2];
    let lambda = 0.3;
    let x = taut_string(&y, lambda);
    let best = tv_objective(&x, &y, lambda);
    let grid: Vec<f64> = (0..=120).map(|i| -0.1 + i as f64 * 0.01).collect();
    for &a in &grid {
        for &b in &grid {
            for &c in &grid {
                assert!(tv_objective(&[a, b, c], &y, lambda) >= best - 1e-12);
            }
        }
    }
    assert_eq!(taut_string(&[2.0, 2.0], 5.0), vec![2.0, 2.0]);
    let flat = taut_string(&[0.0, 4.0, 0.0, 4.0], 100.0);
    assert!(flat.iter().all(|v| (v - 2.0).abs() < 1e-12));
}

#[test]
fn tv_prox_matches_taut_string_columns() {
    let nz = 24;
    let grid = VoxelGrid::centered([4, 5, nz], [1.0; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = (0..grid.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let x = ImageVolume::from_vec(&grid, data).unwrap();
    for weight in [0.05, 0.3, 1.0] {
        let p = tv_z_prox(&x, weight, 100).unwrap();
        for col in 0..20 {
            let (ix, iy) = (col % 4, col / 4);
            let y: Vec<f64> = (0..nz).map(|z| x.get(ix, iy, z)).collect();
            let want = taut_string(&y, weight);
            for (z, w) in want.iter().enumerate() {
                let got = p.get(ix, iy, z);
                assert!((got - w).abs() < 1e-3, "w {weight} col {col} z {z}: {got} vs {w}");
            }
        }
        assert!(tv_z(&p).unwrap() <= tv_z(&x).unwrap());
    }
}

#[test]
fn mlem_increases_likelihood_and_keeps_consistent_fixed_point() {
    let s = small_matrix();
    let grid = s.grid().clone();
    for seed in 0..3u64 {
        let (act, _) = make_phantom(&PhantomSpec::random(seed), &grid).unwrap();
        let y = simulate_counts(&s, &act, 20_000, seed).unwrap();
        let mut state = MlemState::new(&s, &y, None).unwrap();
        let mut prev = poisson_loglik(&s, &state.current, &y).unwrap();
        for _ in 0..30 {
            state = mlem_update(&state, &y, &s).unwrap();
            let l = poisson_loglik(&s, &state.current, &y).unwrap();
            assert!(l >= prev - 1e-9 * prev.abs(), "{l} < {prev}");
            prev = l;
        }
    }
    let mut x = ImageVolume::filled(&grid, 1.0);
    x.data.iter_mut().enumerate().for_each(|(j, v)| *v += (j % 7) as f64 * 0.1);
    let sens = s.sensitivity();
    x.data.iter_mut().zip(&sens.data).for_each(|(v, sj)| {
        if *sj <= 0.0 {
            *v = 0.0
        }
    });
    let y: ProjectionData = s.forward_project(&x).unwrap();
    let out = mlem_reconstruct(&s, &y, 1, Some(&x)).unwrap();
    for (a, b) in out.data.iter().zip(&x.data) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }
    // expected counts keep the total
    assert!((expected_counts(&s, &x, 1e5).unwrap().sum() - 1e5).abs() < 1e-6);
}

#[test]
fn reverse_mean_forms_agree() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let t = rng.random_range(1..=sched.t_max());
        let x_t: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let eps: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let a = mu_theta(&x_t, &eps, t, &sched).unwrap();
        let b = posterior_mean(&x_t, &predict_x0(&x_t, &eps, t, &sched).unwrap(), t, &sched).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-10 * u.abs().max(1.0), "t {t}: {u} vs {v}");
        }
    }
}

#[test]
fn chained_single_steps_match_the_marginal() {
    let sched = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
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
    assert!((mean / (ab.sqrt() * x0) - 1.0).abs() < 0.05);
    assert!((var / (1.0 - ab) - 1.0).abs() < 0.05);
}

#[test]
fn variance_interpolation_endpoints() {
    let sched = NoiseSchedule::default();
    for t in [2, 10, 500, sched.t_max()] {
        let lo = sigma_theta(0.0, t, &sched).unwrap().powi(2);
        assert!((lo / sched.beta_tilde(t) - 1.0).abs() < 1e-12);
        let hi = sigma_theta(1.0, t, &sched).unwrap().powi(2);
        assert!((hi / sched.beta(t) - 1.0).abs() < 1e-12);
    }
}
