//! The five subcommands as library functions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use spectdiff_core::config::RunConfig;
use spectdiff_core::denoiser::checkpoint::Checkpoint;
use spectdiff_core::denoiser::gmm::GmmDenoiser;
use spectdiff_core::denoiser::net::TinyEpsNet;
use spectdiff_core::denoiser::train::{data_stats, train, TrainReport, TrainingVolume};
use spectdiff_core::diffusion::NoiseSchedule;
use spectdiff_core::io::{encode_projection, encode_volume, montage_pgm, sha256_hex};
use spectdiff_core::metrics::{evaluate_sweep, MetricReport};
use spectdiff_core::phantom::{count_scale, make_phantom, simulate_counts, PhantomSpec};
use spectdiff_core::pipeline::{
    diffusion_reconstruct, estimate_kappa, fit_slice_priors, guided_reconstruct, mlem_baseline, sample_seed, training_volume, Condition,
    Scanner,
};
use spectdiff_core::rng::{derive_seed, Purpose};
use spectdiff_core::sampler::{GuidanceConfig, SampleDiagnostics};
use spectdiff_core::{ImageVolume, SystemMatrix};

use crate::dataset::{read, test_dir, train_dir, ArtifactSink, Dataset, Manifest};
use crate::error::{CliError, CliResult};

fn scanner_for(cfg: &RunConfig, conditions: &[Condition]) -> CliResult<Scanner> {
    let mut scanner = Scanner::new(cfg.geometry()?, &cfg.grid()?)?;
    scanner.prepare(conditions)?;
    Ok(scanner)
}

fn f32_rounded(v: &ImageVolume) -> ImageVolume {
    v.map(|x| x as f32 as f64)
}

/// Simulates held-out phantoms with every degraded acquisition and MLEM
/// baseline, plus clean training phantoms.
/// Relative path and contents of files produced off the main thread.
type Files = Vec<(String, Vec<u8>)>;

pub fn cmd_simulate(cfg: &RunConfig, out: &Path, force: bool) -> CliResult<Manifest> {
    cfg.validate()?;
    let scanner = scanner_for(cfg, &cfg.conditions)?;
    let grid = cfg.grid()?;
    let mut sink = ArtifactSink::create(out, force)?;
    sink.meta("kind", "dataset");
    sink.meta("config_hash", cfg.hash());
    sink.meta("geometry_hash", scanner.full.geometry_hash());
    sink.meta("seed", cfg.seed);
    sink.put("config.txt", cfg.to_text().as_bytes())?;
    sink.put("geometry.txt", scanner.geometry.to_text().as_bytes())?;

    let tests: Vec<CliResult<Files>> = (0..cfg.phantoms)
        .into_par_iter()
        .map(|i| {
            let spec = PhantomSpec::random(cfg.phantom_seed(i));
            let (act, anat) = make_phantom(&spec, &grid)?;
            // stored volumes are f32; simulate from exactly what is stored
            let (act, anat) = (f32_rounded(&act), f32_rounded(&anat));
            let scale = count_scale(&scanner.full, &act, cfg.full_counts as f64)?;
            let y_full = simulate_counts(&scanner.full, &act, cfg.full_counts, derive_seed(cfg.seed, Purpose::Counts, i as u64))?;
            let d = test_dir(i);
            let mut files = vec![
                (format!("{d}/spec.txt"), spec.to_text().into_bytes()),
                (format!("{d}/info.txt"), format!("count_scale={scale}\nfull_counts={}\n", cfg.full_counts).into_bytes()),
                (format!("{d}/truth.spvl"), encode_volume(&act)?),
                (format!("{d}/anatomy.spvl"), encode_volume(&anat)?),
                (format!("{d}/full.sppj"), encode_projection(&y_full)?),
            ];
            for cond in &cfg.conditions {
                let y = scanner.degrade(&y_full, cond, spectdiff_core::pipeline::condition_seed(cfg.seed, i as u64, cond))?;
                let x = mlem_baseline(scanner.matrix(cond)?, &y, cfg.mlem_iters)?;
                files.push((format!("{d}/{cond}/proj.sppj"), encode_projection(&y)?));
                files.push((format!("{d}/{cond}/mlem.spvl"), encode_volume(&x)?));
            }
            Ok(files)
        })
        .collect();
    for files in tests {
        for (rel, bytes) in files? {
            sink.put(&rel, &bytes)?;
        }
    }
    for k in 0..cfg.train_phantoms {
        let spec = PhantomSpec::random(cfg.train_phantom_seed(k));
        let (act, anat) = make_phantom(&spec, &grid)?;
        let d = train_dir(k);
        sink.put(&format!("{d}/spec.txt"), spec.to_text().as_bytes())?;
        sink.put(&format!("{d}/truth.spvl"), &encode_volume(&act)?)?;
        sink.put(&format!("{d}/anatomy.spvl"), &encode_volume(&anat)?)?;
    }
    log::info!("simulated {} held-out and {} training phantoms", cfg.phantoms, cfg.train_phantoms);
    sink.finish()
}

fn open_checked(cfg: &RunConfig, data: &Path, conditions: &[Condition]) -> CliResult<(Dataset, Scanner)> {
    let ds = Dataset::open(data)?;
    let scanner = scanner_for(cfg, conditions)?;
    ds.check_compatible(scanner.full.geometry_hash())?;
    Ok((ds, scanner))
}

fn training_set(ds: &Dataset, sens: &ImageVolume, kappa: Option<f64>) -> CliResult<(Vec<TrainingVolume>, f64)> {
    if ds.n_train == 0 {
        return Err(CliError::Data("data set has no training phantoms".into()));
    }
    let pairs = (0..ds.n_train).map(|k| ds.train_phantom(k)).collect::<CliResult<Vec<_>>>()?;
    let kappa = match kappa {
        Some(k) => k,
        None => estimate_kappa(&pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>(), sens)?,
    };
    let data = pairs.iter().map(|(t, a)| training_volume(t, a, sens, kappa)).collect::<Result<Vec<_>, _>>()?;
    Ok((data, kappa))
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
    pub manifest: Manifest,
}

/// Trains the network on the clean training phantoms of a data set.
/// With `resume`, continues from a checkpoint and its step count.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, force: bool, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let (ds, scanner) = open_checked(cfg, data, &[])?;
    let sens = scanner.full.sensitivity();
    let prior = resume.map(|p| Checkpoint::decode(&read(p)?).map_err(CliError::from)).transpose()?;
    let (data_set, kappa) = training_set(&ds, &sens, prior.as_ref().map(|c| c.kappa))?;
    let (mut net, first_step, velocity) = match prior {
        Some(ck) => {
            if ck.net.config() != cfg.net_config()? {
                return Err(CliError::Data("checkpoint network shape differs from the config".into()));
            }
            (ck.net, ck.step, ck.velocity)
        }
        None => {
            let net = TinyEpsNet::init(cfg.net_config()?, cfg.schedule()?, data_stats(&data_set), derive_seed(cfg.seed, Purpose::Init, 0));
            (net, 0, None)
        }
    };
    let mut sink = ArtifactSink::create(out, force)?;
    let report = train(&mut net, &data_set, &cfg.train_config(), first_step, velocity)?;
    let checkpoint = Checkpoint { net, kappa, step: first_step + cfg.train.steps as u64, velocity: Some(report.velocity.clone()) };
    sink.meta("kind", "checkpoint");
    sink.meta("config_hash", cfg.hash());
    sink.meta("geometry_hash", ds.geometry_hash()?);
    sink.meta("first_step", first_step);
    sink.meta("last_step", checkpoint.step);
    sink.put("config.txt", cfg.to_text().as_bytes())?;
    sink.put("model.spnn", &checkpoint.encode())?;
    sink.put("loss.csv", report.loss_csv().as_bytes())?;
    let manifest = sink.finish()?;
    Ok(TrainOutcome { checkpoint, report, manifest })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Mlem,
    DiffSpect3d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorKind {
    /// Trained network from a checkpoint.
    Net,
    /// Per-slice Gaussian fitted to the training phantoms; needs no training.
    Gmm,
}

/// A noise predictor ready for guided sampling.
pub enum Model {
    Net(Checkpoint),
    Gmm { denoiser: GmmDenoiser, sched: NoiseSchedule, kappa: f64 },
}

impl Model {
    pub fn load(cfg: &RunConfig, ds: &Dataset, sens: &ImageVolume, kind: PriorKind, checkpoint: Option<&Path>) -> CliResult<Self> {
        match kind {
            PriorKind::Net => {
                let path = checkpoint.ok_or_else(|| CliError::Config("a checkpoint is needed unless the prior is gmm".into()))?;
                let ck = Checkpoint::decode(&read(path)?)?;
                if ck.net.config().n_slices != ds.config.grid_dims[2] {
                    return Err(CliError::Data("checkpoint slice count differs from the data set grid".into()));
                }
                Ok(Model::Net(ck))
            }
            PriorKind::Gmm => {
                let (data, kappa) = training_set(ds, sens, None)?;
                let sched = cfg.schedule()?;
                let denoiser = GmmDenoiser::per_slice(fit_slice_priors(&data)?, sched.clone())?;
                Ok(Model::Gmm { denoiser, sched, kappa })
            }
        }
    }

    /// Sha256 of the checkpoint bytes, or `gmm`.
    pub fn tag(&self) -> String {
        match self {
            Model::Net(ck) => sha256_hex(&ck.encode()),
            Model::Gmm { .. } => "gmm".into(),
        }
    }
}

/// Guided reconstruction of held-out phantom `i` under `cond`.
pub fn reconstruct_phantom(
    model: &Model,
    scanner: &Scanner,
    ds: &Dataset,
    i: usize,
    cond: &Condition,
    guidance: &GuidanceConfig,
    seed: u64,
) -> CliResult<(ImageVolume, SampleDiagnostics)> {
    let x_in = ds.baseline(i, cond)?;
    let y = ds.degraded(i, cond)?;
    let (_, anatomy, _) = ds.test_phantom(i)?;
    let s: &SystemMatrix = scanner.matrix(cond)?;
    let gc = GuidanceConfig { count_level: cond.count_level(scanner.geometry.n_detectors())?, ..guidance.clone() };
    let seed = sample_seed(seed, i as u64, cond);
    let r = match model {
        Model::Net(ck) => diffusion_reconstruct(&ck.net, ck.kappa, &anatomy, s, &y, &x_in, &gc, seed)?,
        Model::Gmm { denoiser, sched, kappa } => guided_reconstruct(denoiser, sched, *kappa, s, &y, &x_in, &gc, seed)?,
    };
    Ok(r)
}

pub struct ReconstructArgs {
    pub data: PathBuf,
    pub phantom: usize,
    pub condition: Condition,
    pub method: Method,
    pub prior: PriorKind,
    pub checkpoint: Option<PathBuf>,
    /// MLEM iterations; defaults to the config's.
    pub iters: Option<usize>,
}

/// Reconstructs one acquisition; writes the volume, a montage and a
/// provenance sidecar.
pub fn cmd_reconstruct(cfg: &RunConfig, args: &ReconstructArgs, out: &Path, force: bool) -> CliResult<ImageVolume> {
    cfg.validate()?;
    let conds = [args.condition];
    let (ds, scanner) = open_checked(cfg, &args.data, &conds)?;
    let cond = &args.condition;
    let mut prov = BTreeMap::new();
    prov.insert("config_hash", cfg.hash());
    prov.insert("condition", cond.to_string());
    prov.insert("phantom", args.phantom.to_string());
    prov.insert("seed", cfg.seed.to_string());
    let vol = match args.method {
        Method::Mlem => {
            let iters = args.iters.unwrap_or(cfg.mlem_iters);
            prov.insert("method", "mlem".into());
            prov.insert("iters", iters.to_string());
            mlem_baseline(scanner.matrix(cond)?, &ds.degraded(args.phantom, cond)?, iters)?
        }
        Method::DiffSpect3d => {
            let model = Model::load(cfg, &ds, &scanner.full.sensitivity(), args.prior, args.checkpoint.as_deref())?;
            let (vol, diag) = reconstruct_phantom(&model, &scanner, &ds, args.phantom, cond, &cfg.guidance, cfg.seed)?;
            prov.insert("method", "diffspect3d".into());
            prov.insert("model", model.tag());
            prov.insert("lambda_dps", diag.lambda_dps.to_string());
            prov.insert("lambda_mlem", diag.lambda_mlem.to_string());
            prov.insert("sampler_seed", sample_seed(cfg.seed, args.phantom as u64, cond).to_string());
            vol
        }
    };
    let bytes = encode_volume(&vol)?;
    prov.insert("volume_sha256", sha256_hex(&bytes));
    let mut sink = ArtifactSink::create(out, force)?;
    sink.meta("kind", "reconstruction");
    sink.meta("config_hash", cfg.hash());
    sink.put("recon.spvl", &bytes)?;
    sink.put("recon.pgm", &montage_pgm(&vol))?;
    let text: String = prov.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    sink.put("provenance.txt", text.as_bytes())?;
    sink.put("config.txt", cfg.to_text().as_bytes())?;
    sink.finish()?;
    Ok(vol)
}

/// Sweep variants, in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Input,
    NoXinStart,
    NoDps,
    NoTv,
    NoMlem,
    Proposed,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [Variant::NoXinStart, Variant::NoDps, Variant::NoTv, Variant::NoMlem];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Input => "input",
            Variant::NoXinStart => "no_xin_start",
            Variant::NoDps => "no_dps",
            Variant::NoTv => "no_tv",
            Variant::NoMlem => "no_mlem",
            Variant::Proposed => "proposed",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Variant::Input, Variant::NoXinStart, Variant::NoDps, Variant::NoTv, Variant::NoMlem, Variant::Proposed]
            .into_iter()
            .find(|v| v.name() == s)
    }

    /// `base` with this variant's component switched off.
    pub fn guidance(self, base: &GuidanceConfig) -> GuidanceConfig {
        let mut g = base.clone();
        match self {
            Variant::NoXinStart => g.xin_start = false,
            Variant::NoDps => g.use_dps = false,
            Variant::NoTv => g.use_tv = false,
            Variant::NoMlem => g.use_mlem = false,
            Variant::Input | Variant::Proposed => {}
        }
        g
    }
}

/// Report label of one (condition, method) cell.
pub fn row_label(cond: &Condition, method: &str) -> String {
    format!("{cond}/{method}")
}

fn parse_phantom_file(name: &str) -> Option<usize> {
    name.strip_prefix('p')?.strip_suffix(".spvl")?.parse().ok()
}

/// (condition rank, variant rank, method name)
type RowKey = (usize, usize, String);

/// Mean metrics of every `<method>/<condition>/pNNN.spvl` under `volumes`
/// against the data set's references. Rows follow condition order of the
/// data set, then variant order.
pub fn evaluate_dir(ds: &Dataset, volumes: &Path) -> CliResult<MetricReport> {
    let mut items: Vec<(RowKey, usize, Condition, PathBuf)> = Vec::new();
    let cond_rank = |c: &Condition| ds.config.conditions.iter().position(|d| d == c).unwrap_or(usize::MAX);
    let list = |p: &Path| -> CliResult<Vec<(String, PathBuf)>> {
        let mut v: Vec<_> = fs::read_dir(p)
            .map_err(|e| CliError::io(p, e))?
            .filter_map(|e| e.ok())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    for (method, mdir) in list(volumes)?.into_iter().filter(|(_, p)| p.is_dir()) {
        let rank = Variant::from_name(&method).map_or(usize::MAX, |v| v as usize);
        for (cname, cdir) in list(&mdir)?.into_iter().filter(|(_, p)| p.is_dir()) {
            let cond: Condition = cname.parse().map_err(|e| CliError::Data(format!("{}: {e}", cdir.display())))?;
            for (fname, path) in list(&cdir)? {
                if let Some(i) = parse_phantom_file(&fname) {
                    items.push(((cond_rank(&cond), rank, method.clone()), i, cond, path));
                }
            }
        }
    }
    if items.is_empty() {
        return Err(CliError::Data(format!("no volumes under {}", volumes.display())));
    }
    items.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));
    let mut labels = Vec::with_capacity(items.len());
    let mut vols = Vec::with_capacity(items.len());
    let mut refs = Vec::with_capacity(items.len());
    for ((_, _, method), i, cond, path) in &items {
        let (truth, _, scale) = ds.test_phantom(*i)?;
        labels.push(row_label(cond, method));
        vols.push(spectdiff_core::io::decode_volume(&read(path)?)?);
        refs.push(cond.reference(&truth, scale));
    }
    Ok(evaluate_sweep(&labels, &vols, &refs)?)
}

fn write_report(sink: &mut ArtifactSink, report: &MetricReport) -> CliResult<()> {
    sink.put("report.csv", report.to_csv().as_bytes())?;
    sink.put("report.txt", report.to_table().as_bytes())?;
    sink.put("report.meta", report.metadata_text().as_bytes())
}

/// Scores a directory of reconstructions against the data set.
pub fn cmd_evaluate(cfg: &RunConfig, data: &Path, volumes: &Path, out: &Path, force: bool) -> CliResult<MetricReport> {
    let ds = Dataset::open(data)?;
    let mut report = evaluate_dir(&ds, volumes)?;
    report.metadata.insert("config_hash".into(), cfg.hash());
    report.metadata.insert("dataset_geometry_hash".into(), ds.geometry_hash()?.into());
    report.metadata.insert("seed".into(), cfg.seed.to_string());
    let mut sink = ArtifactSink::create(out, force)?;
    sink.meta("kind", "evaluation");
    sink.meta("config_hash", cfg.hash());
    write_report(&mut sink, &report)?;
    sink.finish()?;
    Ok(report)
}

pub struct SweepArgs {
    pub data: PathBuf,
    pub prior: PriorKind,
    pub checkpoint: Option<PathBuf>,
}

pub struct SweepOutcome {
    pub report: MetricReport,
    pub manifest: Manifest,
    /// `(label, phantom, error)` of every failed reconstruction.
    pub failures: Vec<(String, usize, String)>,
}

/// Input, full method and single-component ablations over every
/// condition of the config and every held-out phantom.
pub fn cmd_sweep(cfg: &RunConfig, args: &SweepArgs, out: &Path, force: bool) -> CliResult<SweepOutcome> {
    cfg.validate()?;
    let (ds, scanner) = open_checked(cfg, &args.data, &cfg.conditions)?;
    let model = Model::load(cfg, &ds, &scanner.full.sensitivity(), args.prior, args.checkpoint.as_deref())?;
    let mut jobs = Vec::new();
    for cond in &cfg.conditions {
        let mut variants = vec![Variant::Input, Variant::Proposed];
        if cfg.ablation_conditions.contains(cond) {
            variants.extend(Variant::ABLATIONS);
        }
        variants.sort();
        for v in variants {
            for i in 0..ds.n_test {
                jobs.push((*cond, v, i));
            }
        }
    }
    let results: Vec<CliResult<(ImageVolume, Option<SampleDiagnostics>)>> = jobs
        .par_iter()
        .map(|(cond, v, i)| match v {
            Variant::Input => Ok((ds.baseline(*i, cond)?, None)),
            _ => reconstruct_phantom(&model, &scanner, &ds, *i, cond, &v.guidance(&cfg.guidance), cfg.seed).map(|(x, d)| (x, Some(d))),
        })
        .collect();

    let mut sink = ArtifactSink::create(out, force)?;
    sink.meta("kind", "sweep");
    sink.meta("config_hash", cfg.hash());
    sink.meta("geometry_hash", ds.geometry_hash()?);
    let mut failures = Vec::new();
    let mut lambdas = BTreeMap::new();
    for ((cond, v, i), r) in jobs.iter().zip(results) {
        match r {
            Ok((vol, diag)) => {
                sink.put(&format!("volumes/{}/{cond}/p{i:03}.spvl", v.name()), &encode_volume(&vol)?)?;
                if *i == 0 && matches!(v, Variant::Input | Variant::Proposed) {
                    sink.put(&format!("montages/{cond}/{}.pgm", v.name()), &montage_pgm(&vol))?;
                }
                if let (Variant::Proposed, Some(d)) = (v, diag) {
                    lambdas.insert(format!("lambda_dps.{cond}"), d.lambda_dps.to_string());
                    lambdas.insert(format!("lambda_mlem.{cond}"), d.lambda_mlem.to_string());
                }
            }
            Err(e) => {
                log::warn!("{} phantom {i}: {e}", row_label(cond, v.name()));
                failures.push((row_label(cond, v.name()), *i, e.to_string()));
            }
        }
    }
    let mut report = evaluate_dir(&ds, &sink.root().join("volumes"))?;
    report.metadata.insert("config_hash".into(), cfg.hash());
    report.metadata.insert("seed".into(), cfg.seed.to_string());
    report.metadata.insert("model".into(), model.tag());
    report.metadata.insert("phantoms".into(), ds.n_test.to_string());
    report.metadata.insert("failures".into(), failures.len().to_string());
    report.metadata.extend(lambdas);
    write_report(&mut sink, &report)?;
    if !failures.is_empty() {
        let mut text = String::new();
        for (label, i, e) in &failures {
            let _ = writeln!(text, "{label} p{i:03}: {e}");
        }
        sink.put("failures.txt", text.as_bytes())?;
    }
    sink.put("config.txt", cfg.to_text().as_bytes())?;
    let manifest = sink.finish()?;
    Ok(SweepOutcome { report, manifest, failures })
}
