//! `bsp` — command-line frontend for the B-spline mortality process.
//!
//! One JSON configuration document drives every subcommand; flags override
//! individual fields and always win. Each run writes its outputs plus a
//! `manifest.json` recording the tool version, the resolved configuration,
//! the seed and SHA-256 checksums of all inputs and outputs, so any two
//! runs with the same config, inputs and seed are byte-identical.

mod commands;
mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use bsp_core::data::Gender;

use crate::commands::RunContext;
use crate::config::RunConfig;

/// Errors here are for people: one line on stderr and a nonzero exit.
pub type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

/// Lowercase hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write as _;
        write!(hex, "{byte:02x}").expect("writing to a String cannot fail");
    }
    hex
}

/// Inclusive year range as given on the command line, e.g. `1990..2010`.
#[derive(Debug, Clone, Copy)]
struct OriginRange(i32, i32);

fn parse_origin_range(text: &str) -> Result<OriginRange, String> {
    let (first, last) = text
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got '{text}'"))?;
    let last = last.strip_prefix('=').unwrap_or(last);
    let first: i32 = first
        .trim()
        .parse()
        .map_err(|_| format!("'{first}' is not a year"))?;
    let last: i32 = last
        .trim()
        .parse()
        .map_err(|_| format!("'{last}' is not a year"))?;
    if first > last {
        return Err(format!("origin range {first}..{last} is empty"));
    }
    Ok(OriginRange(first, last))
}

fn parse_gender_flag(text: &str) -> Result<Gender, String> {
    text.parse::<Gender>().map_err(|e| e.to_string())
}

/// Learning and forecasting age-period mortality surfaces with a B-spline
/// process whose coefficients follow locally-adaptive stochastic trends.
#[derive(Parser)]
#[command(name = "bsp", version, about)]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Root random seed, recorded in every output.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Forecast and backtest horizons.
    #[arg(long, global = true, value_name = "H")]
    horizons: Option<usize>,

    /// Inclusive backtest origin range, e.g. 1990..2010.
    #[arg(long, global = true, value_name = "A..B", value_parser = parse_origin_range)]
    origins: Option<OriginRange>,

    /// Keep only surfaces with this country code.
    #[arg(long, global = true, value_name = "CODE")]
    country: Option<String>,

    /// Keep only surfaces with this gender (f or m).
    #[arg(long, global = true, value_name = "G", value_parser = parse_gender_flag)]
    gender: Option<Gender>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the B-spline design matrix and peak ages as CSV.
    Basis,
    /// Estimate model parameters by maximum marginal likelihood.
    Fit,
    /// Smooth surfaces and export coefficient and derivative trajectories.
    Smooth,
    /// Forecast log-rates over future horizons with 95% intervals.
    Forecast,
    /// Generate a synthetic mortality surface from the generative model.
    Simulate,
    /// Evaluate forecasts over rolling training origins.
    Backtest,
    /// Measure convergence of Poisson log-rates to their Gaussian limit.
    LimitCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Basis => "basis",
            Command::Fit => "fit",
            Command::Smooth => "smooth",
            Command::Forecast => "forecast",
            Command::Simulate => "simulate",
            Command::Backtest => "backtest",
            Command::LimitCheck => "limit-check",
        }
    }
}

/// Applies `BSP_THREADS` before any parallel stage starts.
fn cap_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("BSP_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .map_err(|_| format!("BSP_THREADS must be a positive integer, got '{raw}'"))?;
    if threads == 0 {
        return Err("BSP_THREADS must be a positive integer, got '0'".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| format!("cannot configure the thread pool: {e}"))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    cap_threads()?;

    let mut inputs = BTreeMap::new();
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path, &mut inputs)?,
        None => RunConfig::default(),
    };

    // Flags override the document.
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Some(h) = cli.horizons {
        if h == 0 {
            return Err("--horizons must be at least 1".into());
        }
        config.forecast.horizons = h;
        config.backtest.horizons = h;
    }
    if let Some(OriginRange(first, last)) = cli.origins {
        config.backtest.origins = Some((first, last));
    }

    let ctx = RunContext::new(config, inputs)?;
    let country = cli.country.as_deref();
    match &cli.command {
        Command::Basis => commands::run_basis(ctx, country, cli.gender),
        Command::Fit => commands::run_fit(ctx, country, cli.gender),
        Command::Smooth => commands::run_smooth(ctx, country, cli.gender),
        Command::Forecast => commands::run_forecast(ctx, country, cli.gender),
        Command::Simulate => commands::run_simulate(ctx, country, cli.gender),
        Command::Backtest => commands::run_backtest_cmd(ctx, country, cli.gender),
        Command::LimitCheck => commands::run_limit_check(ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {command}: {e}");
            ExitCode::from(1)
        }
    }
}
