mod commands;
mod config;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Check, Sink};
use config::RunConfig;
use output::OutDir;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<meso_rmt::Error> for CliError {
    fn from(e: meso_rmt::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_CHECK: u8 = 4;

#[derive(Parser)]
#[command(name = "meso-rmt", version, about = "Mesoscopic eigenvalue statistics of Wigner-type matrices")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set density.n_points=201`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(short, long, default_value = "out")]
    out: PathBuf,
    /// Evaluate the acceptance gates and exit with 4 when one fails.
    #[arg(long)]
    check: bool,
    /// Worker threads (capped by MESO_RMT_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Self-consistent density of states on an energy grid.
    Density(Common),
    /// Stability-operator reports over a grid of spectral-parameter pairs.
    Stability(Common),
    /// Local-law error decay across matrix sizes.
    LocalLaw(Common),
    /// Monte Carlo linear statistics against the predicted Gaussian.
    Clt(Common),
    /// Limiting variance by kernel quadrature and by the H^1/2 norm.
    Variance(Common),
    /// Every command with its gates; always evaluates checks.
    CheckAll(Common),
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let cap = match std::env::var("MESO_RMT_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&t| t > 0)
                .ok_or_else(|| CliError::Config(format!("MESO_RMT_THREADS must be a positive integer, got `{v}`")))?,
        ),
        Err(_) => None,
    };
    if flag == Some(0) {
        return Err(CliError::Config("--threads must be positive".into()));
    }
    Ok(match (flag, cap) {
        (Some(f), Some(c)) => Some(f.min(c)),
        (f, c) => f.or(c),
    })
}

fn run(name: &str, common: &Common, all: bool) -> Result<bool, CliError> {
    if let Some(t) = thread_count(common.threads)? {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
    }
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    let mut out = OutDir::create(&common.out)?;
    let checks: Vec<Check> = if all {
        commands::check_all(&cfg, &mut out)?
    } else {
        let cmd = commands::ALL.iter().find(|c| c.0 == name).expect("known command").1;
        cmd(&cfg, &mut Sink { out: &mut out, prefix: "" })?
    };
    let gated = common.check || all;
    if gated {
        for c in &checks {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        out.write_json("checks.json", &checks)?;
    }
    out.finish(name, &cfg, gated.then_some(checks.as_slice()))?;
    Ok(!gated || checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common, all) = match &cli.command {
        Cmd::Density(c) => ("density", c, false),
        Cmd::Stability(c) => ("stability", c, false),
        Cmd::LocalLaw(c) => ("local-law", c, false),
        Cmd::Clt(c) => ("clt", c, false),
        Cmd::Variance(c) => ("variance", c, false),
        Cmd::CheckAll(c) => ("check-all", c, true),
    };
    match run(name, common, all) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK),
        Err(e) => {
            eprintln!("meso-rmt {name}: {e}");
            ExitCode::from(match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Numerical(_) | CliError::Io(_) => EXIT_NUMERICAL,
            })
        }
    }
}
