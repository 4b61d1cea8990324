use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spectdiff_cli::commands::{cmd_evaluate, cmd_reconstruct, cmd_simulate, cmd_sweep, cmd_train};
use spectdiff_cli::{CliError, CliResult, Method, PriorKind, ReconstructArgs, RunConfig, SweepArgs};
use spectdiff_core::pipeline::Condition;

#[derive(Parser)]
#[command(name = "spectdiff", version, about = "Desk-scale multi-pinhole SPECT with diffusion-guided reconstruction")]
struct Cli {
    /// key=value run config; unset keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, env = "SPECTDIFF_THREADS")]
    threads: Option<usize>,
    /// Extra config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phantoms, projections and MLEM baselines for every condition.
    Simulate {
        #[arg(long)]
        phantoms: Option<usize>,
        #[arg(long)]
        train_phantoms: Option<usize>,
    },
    /// Train the noise predictor on a data set's clean phantoms.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reconstruct one held-out acquisition.
    Reconstruct(ReconstructCli),
    /// Score a directory of `<method>/<condition>/pNNN.spvl` volumes.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        volumes: PathBuf,
    },
    /// Input, full method and ablations over all conditions.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "net")]
        prior: PriorArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Mlem,
    Diffspect3d,
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Net,
    Gmm,
}

impl From<PriorArg> for PriorKind {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::Net => PriorKind::Net,
            PriorArg::Gmm => PriorKind::Gmm,
        }
    }
}

#[derive(Args)]
struct ReconstructCli {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    phantom: usize,
    /// Dose fraction in (0, 1].
    #[arg(long, conflicts_with = "views", required_unless_present = "views")]
    count_level: Option<f64>,
    /// Number of centre-row detectors kept at full dose.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long, value_enum, default_value = "diffspect3d")]
    method: MethodArg,
    /// MLEM iterations for `--method mlem`.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum, default_value = "net")]
    prior: PriorArg,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    mlem_every: Option<usize>,
    /// `auto` or a value.
    #[arg(long)]
    lambda_dps: Option<String>,
    /// `auto` or a value.
    #[arg(long)]
    lambda_mlem: Option<String>,
    #[arg(long)]
    tv_weight: Option<f64>,
    #[arg(long)]
    no_dual_noise: bool,
    /// `approx` or `exact`.
    #[arg(long)]
    grad_mode: Option<String>,
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::from_text(&text)?;
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn set(cfg: &mut RunConfig, key: &str, v: Option<impl ToString>) -> CliResult<()> {
    if let Some(v) = v {
        cfg.set(key, &v.to_string())?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = load_config(&cli)?;
    match cli.cmd {
        Command::Simulate { phantoms, train_phantoms } => {
            set(&mut cfg, "sim.phantoms", phantoms)?;
            set(&mut cfg, "sim.train_phantoms", train_phantoms)?;
            let m = cmd_simulate(&cfg, &cli.out, cli.force)?;
            println!("wrote {} files to {}", m.files.len(), cli.out.display());
        }
        Command::Train { data, resume, steps } => {
            set(&mut cfg, "train.steps", steps)?;
            let t = cmd_train(&cfg, &data, &cli.out, cli.force, resume.as_deref())?;
            let last = t.report.losses.last().copied().unwrap_or(f64::NAN);
            println!("trained to step {}; final loss {last:.5}", t.checkpoint.step);
        }
        Command::Reconstruct(r) => {
            set(&mut cfg, "guidance.ddim_steps", r.ddim_steps)?;
            set(&mut cfg, "guidance.mlem_every", r.mlem_every)?;
            set(&mut cfg, "guidance.lambda_dps", r.lambda_dps)?;
            set(&mut cfg, "guidance.lambda_mlem", r.lambda_mlem)?;
            set(&mut cfg, "guidance.tv_weight", r.tv_weight)?;
            set(&mut cfg, "guidance.grad_mode", r.grad_mode)?;
            if r.no_dual_noise {
                cfg.set("guidance.dual_noise", "false")?;
            }
            cfg.validate()?;
            let condition = match (r.count_level, r.views) {
                (Some(c), None) => Condition::Count(c),
                (None, Some(n)) => Condition::Views(n),
                _ => return Err(CliError::Config("give exactly one of --count-level and --views".into())),
            };
            let args = ReconstructArgs {
                data: r.data,
                phantom: r.phantom,
                condition,
                method: match r.method {
                    MethodArg::Mlem => Method::Mlem,
                    MethodArg::Diffspect3d => Method::DiffSpect3d,
                },
                prior: r.prior.into(),
                checkpoint: r.checkpoint,
                iters: r.iters,
            };
            cmd_reconstruct(&cfg, &args, &cli.out, cli.force)?;
            println!("wrote {}", cli.out.join("recon.spvl").display());
        }
        Command::Evaluate { data, volumes } => {
            let report = cmd_evaluate(&cfg, &data, &volumes, &cli.out, cli.force)?;
            print!("{}", report.to_table());
        }
        Command::Sweep { data, checkpoint, prior } => {
            let s = cmd_sweep(&cfg, &SweepArgs { data, prior: prior.into(), checkpoint }, &cli.out, cli.force)?;
            print!("{}", s.report.to_table());
            if !s.failures.is_empty() {
                eprintln!("{} reconstructions failed; see failures.txt", s.failures.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
