//! `thmc`: train transport maps, run warped HMC, tune, benchmark and export
//! trajectories. Exit codes: 0 success, 1 usage error, 2 numerical failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use config::{Profile, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "thmc", version, about = "Transport-map HMC: train, sample, tune, benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// gaussian | funnel | logistic
    #[arg(long, global = true)]
    target: Option<String>,
    /// identity | diag | tril | iaf | iafN
    #[arg(long, global = true)]
    map: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, value_enum, global = true)]
    profile: Option<Profile>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a transport map by maximizing the ELBO.
    Train(Common),
    /// Run HMC in the map's coordinates and report diagnostics.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Map checkpoint (default: the one `train` writes).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Search (step size, leapfrog steps) with pilot runs.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train, tune and sample each configured map, writing bias curves.
    Benchmark(Common),
    /// Export one leapfrog trajectory in original and warped coordinates.
    Trajectory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(t) = &common.target {
        cfg.target.name = t.clone();
    }
    if let Some(m) = &common.map {
        cfg.map.kind = m.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = common.profile {
        cfg.profile = p;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if cfg.out.as_os_str().is_empty() {
        cfg.out = PathBuf::from("out");
    }
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(c) => commands::train(&resolve(c)?),
        Command::Sample { common, checkpoint } => commands::sample(&resolve(common)?, checkpoint.as_deref()),
        Command::Tune { common, checkpoint } => commands::tune_command(&resolve(common)?, checkpoint.as_deref()),
        Command::Benchmark(c) => commands::benchmark(&resolve(c)?),
        Command::Trajectory { common, checkpoint } => commands::trajectory(&resolve(common)?, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
