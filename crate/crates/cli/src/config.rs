//! The run configuration document and its resolution into library types.
//!
//! A run is described by one JSON file; command-line flags override single
//! fields after parsing, so the flags always win. Every section has full
//! defaults and an absent section simply means "use the defaults", which
//! keeps minimal configs minimal.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bsp_core::basis::{build_basis, build_default_basis, BasisSet};
use bsp_core::covariance::{build_correlations, CorrelationPair, KernelConfig};
use bsp_core::data::{
    build_surface, parse_hmd_table, read_interchange_file, Gender, MortalitySurface, TableKind,
};
use bsp_core::estimation::FitConfig;
use bsp_core::statespace::HyperParams;

use crate::CliResult;

/// One mortality surface to load: either a previously written interchange
/// CSV, or raw country tables (rates, or deaths plus exposures).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurfaceSource {
    /// Interchange CSV produced by `simulate` or an earlier pipeline run.
    pub interchange: Option<PathBuf>,
    /// Death-count table in the standard age-by-year text layout.
    pub deaths: Option<PathBuf>,
    /// Central exposure table in the same layout.
    pub exposures: Option<PathBuf>,
    /// Central death-rate table in the same layout.
    pub rates: Option<PathBuf>,
    /// Country code recorded on the surface; required for raw tables.
    pub country: Option<String>,
    /// Gender column to extract; required for raw tables.
    pub gender: Option<String>,
    /// Ages above this are folded into one open-ended group.
    pub age_cap: Option<u32>,
    /// Inclusive year window to keep, e.g. `[1933, 2019]`.
    pub year_range: Option<(i32, i32)>,
}

/// B-spline settings: explicit breakpoints or the default age layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSettings {
    /// Interior layout as strictly increasing breakpoints; `null` selects
    /// the default layout over the data's age span.
    pub breakpoints: Option<Vec<f64>>,
    pub degree: usize,
}

impl Default for BasisSettings {
    fn default() -> Self {
        BasisSettings {
            breakpoints: None,
            degree: 3,
        }
    }
}

/// Optimizer settings for the four-parameter marginal-likelihood search.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub n_starts: usize,
    pub max_iters: usize,
    pub penalty_strength: f64,
    pub log_bounds: [(f64, f64); 4],
}

impl Default for FitSettings {
    fn default() -> Self {
        let d = FitConfig::default();
        FitSettings {
            n_starts: d.n_starts,
            max_iters: d.max_iters,
            penalty_strength: d.penalty_strength,
            log_bounds: d.log_bounds,
        }
    }
}

impl FitSettings {
    pub fn to_config(&self, rng_seed: u64) -> FitConfig {
        FitConfig {
            n_starts: self.n_starts,
            max_iters: self.max_iters,
            penalty_strength: self.penalty_strength,
            log_bounds: self.log_bounds,
            rng_seed,
        }
    }
}

/// Forecast settings: drift window, horizons and uncertainty draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSettings {
    /// Years of smoothed derivatives pooled into the drift median.
    pub window: usize,
    /// Steps ahead to forecast.
    pub horizons: usize,
    /// Trajectory draws behind the drift-uncertainty estimate.
    pub sim_draws: usize,
    /// Optimizer starts for the window-variance estimation.
    pub n_starts: usize,
    /// Iteration cap per start.
    pub max_iters: usize,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        ForecastSettings {
            window: 25,
            horizons: 10,
            sim_draws: 200,
            n_starts: 6,
            max_iters: 200,
        }
    }
}

/// Rolling-origin evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestSettings {
    /// Inclusive range of training-end years; `null` keeps the default.
    pub origins: Option<(i32, i32)>,
    pub horizons: usize,
    /// `drift` for the full pipeline, `freeze_last` for the naive baseline.
    pub method: String,
}

impl Default for BacktestSettings {
    fn default() -> Self {
        BacktestSettings {
            origins: None,
            horizons: 10,
            method: "drift".into(),
        }
    }
}

/// Synthetic-surface generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    pub hp: HyperParams,
    pub n_years: usize,
    pub start_year: i32,
    pub age_min: u32,
    pub age_max: u32,
    pub age_step: u32,
    /// Constant exposure-to-risk per cell (poisson mode only).
    pub exposure: f64,
    /// `gaussian` observes noisy log-rates, `poisson` draws death counts.
    pub mode: String,
    /// Common starting level of all coefficient trajectories.
    pub initial_level: f64,
    /// Draw the first state from the diffuse belief instead of pinning it.
    pub diffuse: bool,
    pub country: String,
    pub gender: String,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        SimulateSettings {
            hp: HyperParams {
                sigma2_obs: 1e-4,
                sigma2_beta: 1e-4,
                sigma2_a: 1e-6,
                lambda: 1.0,
            },
            n_years: 60,
            start_year: 1950,
            age_min: 0,
            age_max: 100,
            age_step: 1,
            exposure: 1e5,
            mode: "gaussian".into(),
            initial_level: -3.5,
            diffuse: false,
            country: "SIM".into(),
            gender: "f".into(),
        }
    }
}

/// Settings for the Poisson-to-Gaussian limit diagnostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitCheckSettings {
    pub exposure_levels: Vec<f64>,
    pub n_draws: usize,
    pub log_rate: f64,
    pub sigma2: f64,
}

impl Default for LimitCheckSettings {
    fn default() -> Self {
        LimitCheckSettings {
            exposure_levels: vec![1e2, 1e4, 1e6],
            n_draws: 100_000,
            log_rate: -3.0,
            sigma2: 2.5e-3,
        }
    }
}

/// The whole run configuration. Serialized back verbatim into the manifest
/// so a run can be reproduced from its outputs alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Output directory; created if missing.
    pub out: PathBuf,
    /// Root seed; every stochastic stage derives its own stream from it.
    pub seed: u64,
    /// Surfaces to operate on, in order.
    pub surfaces: Vec<SurfaceSource>,
    pub basis: BasisSettings,
    /// Correlation kernel across trend levels and derivatives.
    pub kernel: KernelConfig,
    /// Optional kernel across accelerations; `null` means uncorrelated.
    pub acceleration_kernel: Option<KernelConfig>,
    /// Fixed model parameters; set to skip estimation in smooth/forecast.
    pub hyperparams: Option<HyperParams>,
    pub fit: FitSettings,
    pub forecast: ForecastSettings,
    pub backtest: BacktestSettings,
    pub simulate: SimulateSettings,
    pub limit_check: LimitCheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            seed: 0,
            surfaces: Vec::new(),
            basis: BasisSettings::default(),
            kernel: KernelConfig::exponential(1.0).expect("static kernel parameters"),
            acceleration_kernel: None,
            hyperparams: None,
            fit: FitSettings::default(),
            forecast: ForecastSettings::default(),
            backtest: BacktestSettings::default(),
            simulate: SimulateSettings::default(),
            limit_check: LimitCheckSettings::default(),
        }
    }
}

impl RunConfig {
    /// Reads and parses the JSON document, recording its checksum.
    pub fn load(path: &Path, inputs: &mut BTreeMap<String, String>) -> CliResult<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        inputs.insert(path.display().to_string(), crate::sha256_hex(text.as_bytes()));
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        Ok(config)
    }

    /// Builds the basis: explicit breakpoints win, otherwise the default
    /// layout over `[age_min, age_max]`.
    pub fn build_basis(&self, age_min: f64, age_max: f64) -> CliResult<BasisSet> {
        let basis = match &self.basis.breakpoints {
            Some(points) => build_basis(points, self.basis.degree)?,
            None => build_default_basis(age_min, age_max)?,
        };
        Ok(basis)
    }

    /// Builds the correlation pair for a basis from the kernel settings.
    pub fn build_correlations(&self, basis: &BasisSet) -> CliResult<CorrelationPair> {
        use bsp_core::covariance::CorrelationSpec;
        let a_spec = match self.acceleration_kernel {
            Some(kernel) => CorrelationSpec::Kernel(kernel),
            None => CorrelationSpec::Identity,
        };
        Ok(build_correlations(basis, &self.kernel, &a_spec)?)
    }
}

/// Smallest and largest age across surfaces, as f64; the default basis span.
pub fn age_span(surfaces: &[MortalitySurface]) -> Option<(f64, f64)> {
    let mut span: Option<(f64, f64)> = None;
    for surface in surfaces {
        let ages = surface.ages();
        let (lo, hi) = (*ages.first()? as f64, *ages.last()? as f64);
        span = Some(match span {
            None => (lo, hi),
            Some((a, b)) => (a.min(lo), b.max(hi)),
        });
    }
    span
}

fn parse_gender(label: &str) -> CliResult<Gender> {
    Ok(label.parse::<Gender>()?)
}

/// Loads one configured surface, recording the checksum of every file read.
fn load_source(
    source: &SurfaceSource,
    inputs: &mut BTreeMap<String, String>,
) -> CliResult<MortalitySurface> {
    if let Some(path) = &source.interchange {
        let bytes =
            fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        inputs.insert(path.display().to_string(), crate::sha256_hex(&bytes));
        return Ok(read_interchange_file(path)?);
    }

    let mut tables = Vec::new();
    for (path, kind) in [
        (&source.rates, TableKind::Rates),
        (&source.deaths, TableKind::Deaths),
        (&source.exposures, TableKind::Exposures),
    ] {
        let Some(path) = path else { continue };
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        inputs.insert(path.display().to_string(), crate::sha256_hex(text.as_bytes()));
        tables.push(parse_hmd_table(&text, kind)?);
    }
    if tables.is_empty() {
        return Err("surface entry needs either an interchange path or raw tables".into());
    }
    let country = source
        .country
        .as_deref()
        .ok_or("raw-table surface entry needs a country code")?;
    let gender = parse_gender(
        source
            .gender
            .as_deref()
            .ok_or("raw-table surface entry needs a gender")?,
    )?;
    let age_cap = source.age_cap.unwrap_or(100);
    Ok(build_surface(
        &tables,
        country,
        gender,
        age_cap,
        source.year_range,
    )?)
}

/// Loads every configured surface, then applies the country/gender filters.
pub fn load_surfaces(
    config: &RunConfig,
    country: Option<&str>,
    gender: Option<Gender>,
    inputs: &mut BTreeMap<String, String>,
) -> CliResult<Vec<MortalitySurface>> {
    let mut surfaces = Vec::with_capacity(config.surfaces.len());
    for source in &config.surfaces {
        surfaces.push(load_source(source, inputs)?);
    }
    if let Some(code) = country {
        surfaces.retain(|s| s.country_code() == code);
    }
    if let Some(g) = gender {
        surfaces.retain(|s| s.gender() == g);
    }
    Ok(surfaces)
}

/// Parses the simulate-section mode label.
pub fn parse_sim_mode(label: &str) -> CliResult<bsp_core::simulate::SimMode> {
    match label {
        "gaussian" => Ok(bsp_core::simulate::SimMode::Gaussian),
        "poisson" => Ok(bsp_core::simulate::SimMode::Poisson),
        other => Err(format!("unknown simulation mode '{other}' (expected gaussian or poisson)")
            .into()),
    }
}

/// Parses the backtest-section method label.
pub fn parse_method(label: &str) -> CliResult<bsp_core::backtest::ForecastMethod> {
    match label {
        "drift" => Ok(bsp_core::backtest::ForecastMethod::Drift),
        "freeze_last" => Ok(bsp_core::backtest::ForecastMethod::FreezeLast),
        other => {
            Err(format!("unknown backtest method '{other}' (expected drift or freeze_last)")
                .into())
        }
    }
}

