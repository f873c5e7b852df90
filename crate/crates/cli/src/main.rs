//! `rsate` command-line tool.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] rsate::Error),
    #[error("{0}")]
    Input(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for data problems, 4 for numerical
    /// or estimation failures.
    fn exit_code(&self) -> u8 {
        use rsate::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Input(_)
            | CliError::Io(_)
            | CliError::Core(E::Schema(_) | E::Parse { .. } | E::Validation(_) | E::Io(_) | E::Csv(_) | E::Json(_)) => 3,
            CliError::Core(E::Numerical(_) | E::Precondition(_) | E::Dimension(_)) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rsate", version, about = "Region-specific treatment effects with conformal selective borrowing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Input dataset CSV (overrides the config).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, env = "RSATE_WORKERS")]
    workers: Option<usize>,
    /// More log output on stderr (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the target-region effect with one or more methods.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated method tags.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Randomization test of the sharp null in the target region.
    Frt {
        #[command(flatten)]
        common: Common,
        /// Comma-separated statistics (method tags).
        #[arg(long, value_delimiter = ',')]
        statistics: Option<Vec<String>>,
        /// Number of randomization draws.
        #[arg(long)]
        b: Option<usize>,
        /// one or two.
        #[arg(long, value_parser = parse_sided)]
        sided: Option<rsate::frt::Sided>,
        /// Keep every draw in the report.
        #[arg(long)]
        include_draws: bool,
    },
    /// Run a simulation study and write the metrics table.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_rep: Option<usize>,
        /// Reuse finished scenarios from a previous, identical run.
        #[arg(long)]
        resume: bool,
    },
    /// Nearest-neighbour matching of auxiliary to target records on the sampling score.
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ratio: Option<usize>,
    },
    /// Write the conformal p-value of every auxiliary record.
    Pvalues {
        #[command(flatten)]
        common: Common,
    },
    /// Write a simulated trial dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_sided(s: &str) -> Result<rsate::frt::Sided, String> {
    match s {
        "one" => Ok(rsate::frt::Sided::One),
        "two" => Ok(rsate::frt::Sided::Two),
        other => Err(format!("expected `one` or `two`, got `{other}`")),
    }
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.out.is_some() {
        cfg.output_dir = common.out.clone();
    }
    if common.data.is_some() {
        cfg.data.path = common.data.clone();
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    Ok(cfg)
}

fn init(common: &Common, cfg: &RunConfig) -> Result<(), CliError> {
    let level = match common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(w) = cfg.workers {
        if w == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Estimate { common, methods } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = methods {
                cfg.estimate.methods = m;
            }
            init(&common, &cfg)?;
            commands::estimate(&cfg)
        }
        Command::Frt { common, statistics, b, sided, include_draws } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = statistics {
                cfg.frt.statistics = s;
            }
            if let Some(b) = b {
                cfg.frt.b = b;
            }
            if let Some(s) = sided {
                cfg.frt.sided = s;
            }
            cfg.frt.include_draws |= include_draws;
            init(&common, &cfg)?;
            commands::frt(&cfg)
        }
        Command::Simulate { common, n_rep, resume } => {
            let mut cfg = resolve(&common)?;
            if let Some(n) = n_rep {
                cfg.simulate.n_rep = n;
            }
            init(&common, &cfg)?;
            commands::simulate(&cfg, resume)
        }
        Command::Match { common, ratio } => {
            let mut cfg = resolve(&common)?;
            if let Some(r) = ratio {
                cfg.matching.ratio = r;
            }
            init(&common, &cfg)?;
            commands::matching(&cfg)
        }
        Command::Pvalues { common } => {
            let cfg = resolve(&common)?;
            init(&common, &cfg)?;
            commands::pvalues(&cfg)
        }
        Command::Generate { common } => {
            let cfg = resolve(&common)?;
            init(&common, &cfg)?;
            commands::generate(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rsate: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
