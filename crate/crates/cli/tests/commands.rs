use std::fs;
use std::path::Path;
use std::process::Command;

use spectdiff_cli::commands::{cmd_evaluate, cmd_reconstruct, cmd_simulate, cmd_sweep, cmd_train};
use spectdiff_cli::dataset::Dataset;
use spectdiff_cli::{CliError, Method, PriorKind, ReconstructArgs, RunConfig, SweepArgs};
use spectdiff_core::io::{decode_volume, encode_volume};
use spectdiff_core::pipeline::Condition;
use spectdiff_core::recon::mlem_reconstruct;
use spectdiff_core::sysmat::{build_system_matrix, RestrictMode};
use spectdiff_core::ViewSubset;

fn small(extra: &str) -> RunConfig {
    RunConfig::from_text(&format!(
        "sim.phantoms=2\nsim.train_phantoms=3\nsim.mlem_iters=10\nnet.channels=3\nnet.embed_dim=8\n\
         train.steps=4\ntrain.batch_size=2\nguidance.ddim_steps=4\nguidance.mlem_every=2\nseed=11\n{extra}"
    ))
    .unwrap()
}

#[test]
fn simulate_lists_every_projection_set_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("");
    let a = cmd_simulate(&cfg, &dir.path().join("a"), false).unwrap();
    let n_proj = a.files.keys().filter(|p| p.ends_with(".sppj")).count();
    assert_eq!(n_proj, 2 * (10 + 1));
    assert_eq!(a.meta["config_hash"], cfg.hash());

    let b = cmd_simulate(&cfg, &dir.path().join("b"), false).unwrap();
    assert_eq!(a, b);
    assert!(matches!(cmd_simulate(&cfg, &dir.path().join("a"), false), Err(CliError::Config(_))));
    assert!(cmd_simulate(&cfg, &dir.path().join("a"), true).is_ok());
}

#[test]
fn training_needs_only_clean_volumes_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small("sim.conditions=");
    cfg.phantoms = 0;
    cmd_simulate(&cfg, &dir.path().join("data"), false).unwrap();
    let t = cmd_train(&cfg, &dir.path().join("data"), &dir.path().join("m1"), false, None).unwrap();
    let csv = fs::read_to_string(dir.path().join("m1/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + cfg.train.steps);
    assert_eq!(t.checkpoint.step, 4);

    let ck = dir.path().join("m1/model.spnn");
    let r = cmd_train(&cfg, &dir.path().join("data"), &dir.path().join("m2"), false, Some(&ck)).unwrap();
    assert_eq!(r.checkpoint.step, 8);
    let csv = fs::read_to_string(dir.path().join("m2/loss.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("5,"));
}

#[test]
fn reconstruct_paths_and_geometry_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("sim.conditions=count_5pct,views_5");
    let data = dir.path().join("data");
    cmd_simulate(&cfg, &data, false).unwrap();

    let args = |method, cond| ReconstructArgs {
        data: data.clone(),
        phantom: 1,
        condition: cond,
        method,
        prior: PriorKind::Gmm,
        checkpoint: None,
        iters: None,
    };
    let vol = cmd_reconstruct(&cfg, &args(Method::Mlem, Condition::Views(5)), &dir.path().join("mlem"), false).unwrap();
    let ds = Dataset::open(&data).unwrap();
    let stored = ds.baseline(1, &Condition::Views(5)).unwrap();
    assert_eq!(encode_volume(&vol).unwrap(), encode_volume(&stored).unwrap());

    // same answer as the classic module directly
    let geom = cfg.geometry().unwrap();
    let s = build_system_matrix(&geom, &cfg.grid().unwrap()).unwrap();
    let sub = ViewSubset::preset(&geom, 5).unwrap();
    let direct =
        mlem_reconstruct(&s.restrict_views(&sub, RestrictMode::Remove).unwrap(), &ds.degraded(1, &Condition::Views(5)).unwrap(), 10, None)
            .unwrap();
    assert_eq!(vol, direct);

    let pure = small("sim.conditions=count_5pct,views_5\nguidance.lambda_dps=0\nguidance.lambda_mlem=0\nguidance.tv_weight=0");
    let out = dir.path().join("dsp");
    let v = cmd_reconstruct(&pure, &args(Method::DiffSpect3d, Condition::Count(0.05)), &out, false).unwrap();
    assert!(v.is_finite() && v.min() >= 0.0);
    let prov = fs::read_to_string(out.join("provenance.txt")).unwrap();
    assert!(prov.contains("lambda_dps=0\n") && prov.contains(&format!("config_hash={}", pure.hash())));
    let pgm = fs::read(out.join("recon.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n96 32\n255\n"));

    let moved = small("sim.conditions=count_5pct,views_5\ngeometry.scale=1.1");
    let err = cmd_reconstruct(&moved, &args(Method::Mlem, Condition::Views(5)), &dir.path().join("x"), false);
    assert!(matches!(err, Err(CliError::Data(_))));
    let missing = cmd_reconstruct(&cfg, &args(Method::Mlem, Condition::Views(7)), &dir.path().join("y"), false);
    assert!(matches!(missing, Err(CliError::Data(_))));
}

#[test]
fn sweep_rows_follow_the_ablation_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("sim.conditions=count_5pct,views_9\nsweep.ablation_conditions=count_5pct");
    let data = dir.path().join("data");
    cmd_simulate(&cfg, &data, false).unwrap();
    cmd_train(&cfg, &data, &dir.path().join("model"), false, None).unwrap();
    let args = SweepArgs { data: data.clone(), prior: PriorKind::Net, checkpoint: Some(dir.path().join("model/model.spnn")) };
    let s = cmd_sweep(&cfg, &args, &dir.path().join("sweep"), false).unwrap();
    let labels: Vec<_> = s.report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "count_5pct/input",
            "count_5pct/no_xin_start",
            "count_5pct/no_dps",
            "count_5pct/no_tv",
            "count_5pct/no_mlem",
            "count_5pct/proposed",
            "views_9/input",
            "views_9/proposed"
        ]
    );
    assert!(s.failures.is_empty());
    assert!(s.report.rows.iter().all(|r| r.n == 2));

    // the input row is the MLEM baseline scored on its own
    let only_input = dir.path().join("only_input");
    for i in 0..2 {
        let p = only_input.join(format!("input/count_5pct/p{i:03}.spvl"));
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::copy(data.join(format!("test/p{i:03}/count_5pct/mlem.spvl")), &p).unwrap();
    }
    let e = cmd_evaluate(&cfg, &data, &only_input, &dir.path().join("eval"), false).unwrap();
    assert_eq!(e.rows[0], s.report.rows[0]);
    let meta = fs::read_to_string(dir.path().join("sweep/report.meta")).unwrap();
    assert!(meta.contains(&format!("config_hash={}", cfg.hash())));
    assert!(dir.path().join("sweep/montages/views_9/proposed.pgm").exists());
    let v = decode_volume(&fs::read(dir.path().join("sweep/volumes/proposed/views_9/p001.spvl")).unwrap()).unwrap();
    assert!(v.min() >= 0.0);
}

fn spectdiff(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_spectdiff")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "train.stpes=3\n").unwrap();
    let out = spectdiff(&["--config", "bad.cfg", "simulate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key"));

    let out = spectdiff(&["--out", "m", "train", "--data", "nowhere"], dir.path());
    assert_eq!(out.status.code(), Some(3));

    let out = spectdiff(&["--set", "train.learning_rate=-1", "simulate"], dir.path());
    assert_eq!(out.status.code(), Some(2));

    fs::write(dir.path().join("tiny.cfg"), "sim.phantoms=1\nsim.train_phantoms=0\nsim.conditions=views_9\nsim.mlem_iters=2\n").unwrap();
    let out = spectdiff(&["--config", "tiny.cfg", "--out", "d", "--threads", "1", "simulate"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = spectdiff(&["--config", "tiny.cfg", "--out", "d", "simulate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out =
        spectdiff(&["--config", "tiny.cfg", "--out", "r", "reconstruct", "--data", "d", "--views", "9", "--method", "mlem"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("r/recon.spvl").exists());
}
