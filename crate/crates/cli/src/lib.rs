//! Experiment driver: configuration, per-`n` pipelines and the five commands
//! `minimize`, `scan`, `layers`, `diagnose` and `fit-decay`.

pub mod commands;
pub mod config;
pub mod output;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{BcChoice, ExperimentConfig};

/// Worker-count override for the per-`n` pool.
pub const WORKERS_ENV: &str = "TWINLATTICE_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] twinlattice::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    /// Runs finished but some did not meet their contract.
    #[error("{} run(s) failed: {}", .0.len(), .0.join("; "))]
    RunFailures(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "twinlattice", version, allow_negative_numbers = true, about = "Twin minimizers and layer energies of constrained two-well lattice chains")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Twin, middle-atom preoptimization and Newton for every n; full per-run output.
    #[command(allow_negative_numbers = true)]
    Minimize,
    /// Energy scaling table over n.
    #[command(allow_negative_numbers = true)]
    Scan,
    /// Boundary and internal layer energies and the three-layer sums.
    #[command(allow_negative_numbers = true)]
    Layers,
    /// Good rows and energy census of the minimizers.
    #[command(allow_negative_numbers = true)]
    Diagnose,
    /// Deviation from the twin and per-side exponential fits.
    #[command(allow_negative_numbers = true)]
    FitDecay,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Minimize => "minimize",
            Command::Scan => "scan",
            Command::Layers => "layers",
            Command::Diagnose => "diagnose",
            Command::FitDecay => "fit-decay",
        }
    }
}

/// Flags mirror the config fields and win over the file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML file with any subset of the config fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub a: Option<f64>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Repeatable; replaces the whole list.
    #[arg(long = "n", global = true)]
    pub n: Vec<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    #[arg(long, global = true)]
    pub c_tilde: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long = "out", global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub bc: Option<BcChoice>,
    #[arg(long, global = true)]
    pub variable_tau: bool,
    /// Smoke-test settings: short layer searches, no domain doubling.
    #[arg(long, global = true)]
    pub quick: bool,
    #[arg(long, global = true)]
    pub grad_tol: Option<f64>,
    /// Repeatable; replaces the layer strip sizes.
    #[arg(long = "layer-n", global = true)]
    pub layer_n: Vec<usize>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_toml_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.a {
            c.a = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if !self.n.is_empty() {
            c.n_list = self.n.clone();
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.delta {
            c.delta = v;
        }
        if self.c_tilde.is_some() {
            c.c_tilde = self.c_tilde;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = &self.out {
            c.output_dir = v.clone();
        }
        if let Some(v) = self.bc {
            c.bc = v;
        }
        c.variable_tau |= self.variable_tau;
        c.quick |= self.quick;
        if let Some(v) = self.grad_tol {
            c.grad_tol = v;
        }
        if !self.layer_n.is_empty() {
            c.layer_n = self.layer_n.clone();
        } else if c.quick && c.layer_n == ExperimentConfig::default().layer_n {
            c.layer_n = vec![4, 8];
        }
        c.validate()?;
        Ok(c)
    }
}

/// Pool for the per-`n` runs, sized by [`WORKERS_ENV`] or the machine.
pub fn worker_pool() -> Result<rayon::ThreadPool, CliError> {
    let workers = match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
            .ok_or_else(|| CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |k| k.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))
}

pub fn execute(command: Command, cfg: &ExperimentConfig) -> Result<commands::Outcome, CliError> {
    let pool = worker_pool()?;
    pool.install(|| match command {
        Command::Minimize => commands::minimize(cfg),
        Command::Scan => commands::scan(cfg),
        Command::Layers => commands::layers(cfg),
        Command::Diagnose => commands::diagnose(cfg),
        Command::FitDecay => commands::fit_decay(cfg),
    })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = cli.overrides.resolve().and_then(|cfg| execute(cli.command, &cfg));
    match result {
        Ok(out) => {
            log::info!("{}: wrote {}", cli.command.name(), out.summary.display());
            0
        }
        Err(e) => {
            eprintln!("twinlattice {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
