use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{Algorithm, ConfigError};

#[derive(Parser)]
#[command(
    name = "ganbound",
    version,
    about = "Estimate the ground-truth error of unsupervised cross-domain mappings",
    after_help = "Each run subcommand takes a JSON configuration file. The configuration \
                  schema and the layout of summary.json are documented in README.md.\n\n\
                  Exit codes: 0 ok, 1 configuration or runtime error, 2 completed with a \
                  warning, 3 verification failure."
)]
struct Cli {
    /// Worker threads for the parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pick the stopping epoch of G1 by the bound.
    Stop(RunArgs),
    /// Choose among candidate architectures by the bound.
    Select(RunArgs),
    /// Bound the error of G1 on individual held-out samples.
    PerSample(RunArgs),
    /// Hyperparameter search driven by the bound.
    Hyperband(RunArgs),
    /// Find the largest trade-off weight that keeps the witness in the low-discrepancy set.
    Calibrate(RunArgs),
    /// Check the finite-pool inequality against a known target.
    Verify(RunArgs),
    /// Regenerate charts and statistics from the CSVs of an earlier run.
    Report {
        /// Output directory of the earlier run.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    config: PathBuf,
    /// Override a configuration value, e.g. --set bound.lambda=0.5 (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Replace the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; takes precedence over GANBOUND_OUT and out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `--out` wins outright. Otherwise the config's `out_dir` (default
/// `ganbound-out/<command>`) is resolved under `GANBOUND_OUT` when set.
fn output_dir(args: &RunArgs, cfg_dir: Option<&Path>, command: &str) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    let rel = cfg_dir.map_or_else(|| Path::new("ganbound-out").join(command), Path::to_path_buf);
    match std::env::var_os("GANBOUND_OUT") {
        Some(root) if !root.is_empty() && rel.is_relative() => PathBuf::from(root).join(rel),
        _ => rel,
    }
}

fn run(algorithm: Algorithm, name: &str, args: &RunArgs) -> anyhow::Result<u8> {
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = config::load(&args.config, &overrides)?;
    cfg.check_algorithm(algorithm)?;
    let out = output_dir(args, cfg.out_dir.as_deref(), name);
    std::fs::create_dir_all(&out).map_err(|e| anyhow::anyhow!("creating {}: {e}", out.display()))?;
    log::info!("writing {name} artifacts to {}", out.display());
    match algorithm {
        Algorithm::Stop => commands::stop(&cfg, &out),
        Algorithm::Select => commands::select(&cfg, &out),
        Algorithm::PerSample => commands::per_sample(&cfg, &out),
        Algorithm::Hyperband => commands::hyperband(&cfg, &out),
        Algorithm::Calibrate => commands::calibrate(&cfg, &out),
        Algorithm::Verify => commands::verify(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        ganbound::parallel::configure_threads(jobs);
    }
    let result = match &cli.command {
        Command::Stop(a) => run(Algorithm::Stop, "stop", a),
        Command::Select(a) => run(Algorithm::Select, "select", a),
        Command::PerSample(a) => run(Algorithm::PerSample, "per-sample", a),
        Command::Hyperband(a) => run(Algorithm::Hyperband, "hyperband", a),
        Command::Calibrate(a) => run(Algorithm::Calibrate, "calibrate", a),
        Command::Verify(a) => run(Algorithm::Verify, "verify", a),
        Command::Report { dir } => commands::report(dir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            if e.downcast_ref::<ConfigError>().is_some() {
                eprintln!("config error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
