//! Implementations of the subcommands: each one loads what it needs, runs
//! the mapped library operation, writes plot-ready CSV/JSON files and ends
//! by writing `manifest.json` (version, command, seed, config echo and the
//! checksums of every input and output). Nothing here is stochastic beyond
//! the recorded seed, so reruns of the same config byte-match.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use bsp_core::backtest::{run_backtest, BacktestConfig, BacktestSpec};
use bsp_core::basis::{design_matrix, BasisSet};
use bsp_core::covariance::CorrelationPair;
use bsp_core::data::{Gender, MortalitySurface};
use bsp_core::estimation::{fit, FitResult};
use bsp_core::forecast::{build_drift_model, forecast, DriftConfig, Z95};
use bsp_core::kalman::{filter, project_to_surface, smooth, SmootherResult};
use bsp_core::simulate::{
    poisson_limit_check, simulate_surface, ExposureSpec, LimitCheckConfig, SimConfig,
};
use bsp_core::statespace::{
    assemble, data_driven_initial_mean, GaussianBelief, HyperParams, StateLayout, StateSpaceModel,
};

use crate::config::{age_span, load_surfaces, parse_method, parse_sim_mode, RunConfig};
use crate::CliResult;

/// Everything a command run accumulates: the resolved config, the output
/// directory, and the checksums destined for the manifest.
pub struct RunContext {
    pub config: RunConfig,
    pub out: PathBuf,
    pub inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

impl RunContext {
    pub fn new(config: RunConfig, inputs: BTreeMap<String, String>) -> CliResult<Self> {
        let out = config.out.clone();
        fs::create_dir_all(&out)
            .map_err(|e| format!("cannot create output directory {}: {e}", out.display()))?;
        Ok(RunContext {
            config,
            out,
            inputs,
            outputs: BTreeMap::new(),
        })
    }

    /// Writes one output file and records its checksum.
    fn write_output(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        self.outputs.insert(name.to_string(), crate::sha256_hex(bytes));
        Ok(())
    }

    /// Writes `manifest.json`, the last file of every run.
    fn finish(self, command: &str) -> CliResult<()> {
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: self.config.seed,
            config: &self.config,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.out.join("manifest.json");
        fs::write(&path, text.as_bytes())
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        Ok(())
    }

    fn load_surfaces(
        &mut self,
        country: Option<&str>,
        gender: Option<Gender>,
    ) -> CliResult<Vec<MortalitySurface>> {
        let surfaces = load_surfaces(&self.config, country, gender, &mut self.inputs)?;
        if surfaces.is_empty() {
            return Err("no surfaces left after loading and filtering; \
                 configure at least one matching `surfaces` entry"
                .into());
        }
        Ok(surfaces)
    }

    fn basis_for(&self, surfaces: &[MortalitySurface]) -> CliResult<BasisSet> {
        let (lo, hi) = age_span(surfaces).ok_or("surfaces carry no ages")?;
        self.config.build_basis(lo, hi)
    }
}

/// A fitted surface as recorded in `fit.json`.
#[derive(Serialize, Deserialize)]
struct FitRecord {
    country: String,
    gender: Gender,
    result: FitResult,
}

/// Assembles the state-space model for a surface, seeding the initial mean
/// from the first year's observed log-rates.
fn surface_model(
    surface: &MortalitySurface,
    basis: &BasisSet,
    correlations: &CorrelationPair,
    hp: &HyperParams,
) -> CliResult<StateSpaceModel> {
    let ages = surface.age_grid();
    let lags = surface.lags();
    let mut model = assemble(basis, correlations, hp, &ages, &lags)?;
    let design = design_matrix(basis, &ages)?;
    let observations = surface.observations();
    model.initial.mean = data_driven_initial_mean(&design, &observations[0])?;
    Ok(model)
}

/// Model parameters for a surface: explicit config values win, then a
/// matching record in a previously written `fit.json`, then a fresh fit.
fn resolve_hyperparams(
    ctx: &mut RunContext,
    surface: &MortalitySurface,
    basis: &BasisSet,
    correlations: &CorrelationPair,
    index: usize,
) -> CliResult<HyperParams> {
    if let Some(hp) = ctx.config.hyperparams {
        return Ok(hp);
    }
    let fit_path = ctx.out.join("fit.json");
    if let Ok(text) = fs::read_to_string(&fit_path) {
        let records: Vec<FitRecord> = serde_json::from_str(&text)
            .map_err(|e| format!("invalid {}: {e}", fit_path.display()))?;
        if let Some(record) = records.iter().find(|r| {
            r.country == surface.country_code() && r.gender == surface.gender()
        }) {
            ctx.inputs
                .insert(fit_path.display().to_string(), crate::sha256_hex(text.as_bytes()));
            return Ok(record.result.best);
        }
    }
    let fit_config = ctx
        .config
        .fit
        .to_config(ctx.config.seed.wrapping_add(index as u64));
    Ok(fit(surface, basis, correlations, &fit_config)?.best)
}

fn filter_and_smooth(
    model: &StateSpaceModel,
    surface: &MortalitySurface,
) -> CliResult<SmootherResult> {
    let observations = surface.observations();
    let filtered = filter(model, &observations)?;
    Ok(smooth(model, &filtered)?)
}

// --- basis ---

pub fn run_basis(mut ctx: RunContext, country: Option<&str>, gender: Option<Gender>) -> CliResult<()> {
    // The design matrix is evaluated on the data's age grid when surfaces
    // are configured, otherwise on integer ages over the basis span.
    let (basis, ages) = if ctx.config.surfaces.is_empty() {
        let basis = ctx.config.build_basis(0.0, 100.0)?;
        let (lo, hi) = (basis.knots()[0], *basis.knots().last().expect("nonempty knots"));
        let ages: Vec<f64> = (lo.ceil() as i64..=hi.floor() as i64)
            .map(|a| a as f64)
            .collect();
        (basis, ages)
    } else {
        let surfaces = ctx.load_surfaces(country, gender)?;
        let basis = ctx.basis_for(&surfaces)?;
        (basis, surfaces[0].age_grid())
    };

    let p = basis.p();
    let mut csv = String::from("age");
    for j in 1..=p {
        write!(csv, ",g{j}")?;
    }
    csv.push('\n');
    for &age in &ages {
        write!(csv, "{age}")?;
        for value in basis.evaluate(age)? {
            write!(csv, ",{value}")?;
        }
        csv.push('\n');
    }
    ctx.write_output("basis.csv", csv.as_bytes())?;

    let mut peaks = String::from("spline,peak_age\n");
    for (j, peak) in basis.peak_ages().iter().enumerate() {
        writeln!(peaks, "{},{}", j + 1, peak)?;
    }
    ctx.write_output("peaks.csv", peaks.as_bytes())?;
    ctx.finish("basis")
}

// --- fit ---

pub fn run_fit(mut ctx: RunContext, country: Option<&str>, gender: Option<Gender>) -> CliResult<()> {
    let surfaces = ctx.load_surfaces(country, gender)?;
    let basis = ctx.basis_for(&surfaces)?;
    let correlations = ctx.config.build_correlations(&basis)?;

    let mut records = Vec::with_capacity(surfaces.len());
    for (index, surface) in surfaces.iter().enumerate() {
        let fit_config = ctx
            .config
            .fit
            .to_config(ctx.config.seed.wrapping_add(index as u64));
        let result = fit(surface, &basis, &correlations, &fit_config)?;
        records.push(FitRecord {
            country: surface.country_code().to_string(),
            gender: surface.gender(),
            result,
        });
    }
    let mut text = serde_json::to_string_pretty(&records)?;
    text.push('\n');
    ctx.write_output("fit.json", text.as_bytes())?;
    ctx.finish("fit")
}

// --- smooth ---

pub fn run_smooth(mut ctx: RunContext, country: Option<&str>, gender: Option<Gender>) -> CliResult<()> {
    let surfaces = ctx.load_surfaces(country, gender)?;
    let basis = ctx.basis_for(&surfaces)?;
    let correlations = ctx.config.build_correlations(&basis)?;
    let layout = StateLayout::new(basis.p());

    let mut surface_csv = String::from("country,gender,year,age,mean,lo95,hi95\n");
    let mut coef_csv = String::from(
        "country,gender,year,spline,level,level_lo95,level_hi95,deriv,deriv_lo95,deriv_hi95\n",
    );
    for (index, surface) in surfaces.iter().enumerate() {
        let hp = resolve_hyperparams(&mut ctx, surface, &basis, &correlations, index)?;
        let model = surface_model(surface, &basis, &correlations, &hp)?;
        let smoother = filter_and_smooth(&model, surface)?;
        let (code, gender) = (surface.country_code(), surface.gender());
        let ages = surface.ages();
        let years = surface.years();

        for (t, &year) in years.iter().enumerate() {
            let belief = &smoother.smoothed[t];
            let (mean, var) = project_to_surface(&model, belief)?;
            for (i, &age) in ages.iter().enumerate() {
                let half = Z95 * var[i].max(0.0).sqrt();
                writeln!(
                    surface_csv,
                    "{code},{gender},{year},{age},{},{},{}",
                    mean[i],
                    mean[i] - half,
                    mean[i] + half
                )?;
            }
            for j in 0..basis.p() {
                let (li, di) = (layout.level(j), layout.derivative(j));
                let level = belief.mean[li];
                let level_half = Z95 * belief.cov[(li, li)].max(0.0).sqrt();
                let deriv = belief.mean[di];
                let deriv_half = Z95 * belief.cov[(di, di)].max(0.0).sqrt();
                writeln!(
                    coef_csv,
                    "{code},{gender},{year},{},{level},{},{},{deriv},{},{}",
                    j + 1,
                    level - level_half,
                    level + level_half,
                    deriv - deriv_half,
                    deriv + deriv_half
                )?;
            }
        }
    }
    ctx.write_output("smooth.csv", surface_csv.as_bytes())?;
    ctx.write_output("coefficients.csv", coef_csv.as_bytes())?;
    ctx.finish("smooth")
}

// --- forecast ---

pub fn run_forecast(
    mut ctx: RunContext,
    country: Option<&str>,
    gender: Option<Gender>,
) -> CliResult<()> {
    let surfaces = ctx.load_surfaces(country, gender)?;
    let basis = ctx.basis_for(&surfaces)?;
    let correlations = ctx.config.build_correlations(&basis)?;
    let settings = ctx.config.forecast.clone();

    let mut forecast_csv = String::from("country,gender,horizon,year,age,point,lo95,hi95\n");
    let mut coef_csv = String::from("country,gender,year,spline,mean\n");
    for (index, surface) in surfaces.iter().enumerate() {
        let hp = resolve_hyperparams(&mut ctx, surface, &basis, &correlations, index)?;
        let model = surface_model(surface, &basis, &correlations, &hp)?;
        let smoother = filter_and_smooth(&model, surface)?;
        let drift_config = DriftConfig {
            window: settings.window,
            sim_draws: settings.sim_draws,
            rng_seed: ctx.config.seed.wrapping_add(1000 + index as u64),
            n_starts: settings.n_starts,
            max_iters: settings.max_iters,
            ..DriftConfig::default()
        };
        let drift = build_drift_model(&smoother, &model, surface, &correlations, &hp, &drift_config)?;

        // Future sampling keeps the cadence of the observed series.
        let lags = surface.lags();
        let gap = lags.last().copied().unwrap_or(1.0);
        let future = vec![gap; settings.horizons];
        let ages = surface.age_grid();
        let result = forecast(&drift, &basis, &ages, settings.horizons, &future)?;

        let (code, gender) = (surface.country_code(), surface.gender());
        let last_year = *surface.years().last().expect("nonempty years");
        for h in &result.horizons {
            let year = last_year + (gap * h.horizon as f64).round() as i32;
            for (i, &age) in surface.ages().iter().enumerate() {
                writeln!(
                    forecast_csv,
                    "{code},{gender},{},{year},{age},{},{},{}",
                    h.horizon, h.point[i], h.lower[i], h.upper[i]
                )?;
            }
            for j in 0..basis.p() {
                writeln!(coef_csv, "{code},{gender},{year},{},{}", j + 1, h.coefficients[j])?;
            }
        }
    }
    ctx.write_output("forecast.csv", forecast_csv.as_bytes())?;
    ctx.write_output("forecast_coefficients.csv", coef_csv.as_bytes())?;
    ctx.finish("forecast")
}

// --- simulate ---

pub fn run_simulate(
    mut ctx: RunContext,
    country: Option<&str>,
    gender: Option<Gender>,
) -> CliResult<()> {
    let settings = ctx.config.simulate.clone();
    if settings.age_step == 0 {
        return Err("simulate.age_step must be at least 1".into());
    }
    if settings.age_max < settings.age_min {
        return Err("simulate.age_max must not precede simulate.age_min".into());
    }
    let ages: Vec<u32> = (settings.age_min..=settings.age_max)
        .step_by(settings.age_step as usize)
        .collect();
    let basis = ctx
        .config
        .build_basis(settings.age_min as f64, settings.age_max as f64)?;
    let correlations = ctx.config.build_correlations(&basis)?;

    let layout = StateLayout::new(basis.p());
    let mut initial = if settings.diffuse {
        GaussianBelief::diffuse(layout.dim())
    } else {
        GaussianBelief::new(
            nalgebra::DVector::zeros(layout.dim()),
            nalgebra::DMatrix::zeros(layout.dim(), layout.dim()),
        )?
    };
    for j in 0..basis.p() {
        initial.mean[layout.level(j)] = settings.initial_level;
    }

    let sim_config = SimConfig {
        hp: settings.hp,
        basis: basis.clone(),
        correlations,
        n_years: settings.n_years,
        start_year: settings.start_year,
        ages,
        exposures: ExposureSpec::Constant(settings.exposure),
        rng_seed: ctx.config.seed,
        mode: parse_sim_mode(&settings.mode)?,
        initial,
        country_code: country.map(str::to_string).unwrap_or(settings.country),
        gender: match gender {
            Some(g) => g,
            None => settings.gender.parse()?,
        },
    };
    let (surface, states) = simulate_surface(&sim_config)?;

    let mut interchange = Vec::new();
    bsp_core::data::write_interchange(&surface, &mut interchange)?;
    ctx.write_output("surface.csv", &interchange)?;

    let mut states_csv = String::from("year,spline,level,derivative,acceleration\n");
    for (t, &year) in surface.years().iter().enumerate() {
        for j in 0..basis.p() {
            writeln!(
                states_csv,
                "{year},{},{},{},{}",
                j + 1,
                states[t][layout.level(j)],
                states[t][layout.derivative(j)],
                states[t][layout.acceleration(j)]
            )?;
        }
    }
    ctx.write_output("states.csv", states_csv.as_bytes())?;
    ctx.finish("simulate")
}

// --- backtest ---

pub fn run_backtest_cmd(
    mut ctx: RunContext,
    country: Option<&str>,
    gender: Option<Gender>,
) -> CliResult<()> {
    let surfaces = ctx.load_surfaces(country, gender)?;
    let basis = ctx.basis_for(&surfaces)?;
    let correlations = ctx.config.build_correlations(&basis)?;
    let settings = ctx.config.backtest.clone();

    let mut spec = BacktestSpec {
        horizons: settings.horizons,
        seed: ctx.config.seed,
        ..BacktestSpec::default()
    };
    if let Some((first, last)) = settings.origins {
        if first > last {
            return Err(format!("origin range {first}..{last} is empty").into());
        }
        spec.origins = (first..=last).collect();
    }
    let forecast_settings = &ctx.config.forecast;
    let backtest_config = BacktestConfig {
        basis,
        correlations,
        fit: ctx.config.fit.to_config(ctx.config.seed),
        drift: DriftConfig {
            window: forecast_settings.window,
            sim_draws: forecast_settings.sim_draws,
            rng_seed: ctx.config.seed,
            n_starts: forecast_settings.n_starts,
            max_iters: forecast_settings.max_iters,
            ..DriftConfig::default()
        },
        method: parse_method(&settings.method)?,
    };
    let report = run_backtest(&surfaces, &spec, &backtest_config)?;

    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    ctx.write_output("report.json", text.as_bytes())?;

    let mut metrics = String::from(
        "horizon,n_cells,median_abs_error,q1_abs_error,q3_abs_error,coverage95\n",
    );
    for m in &report.metrics {
        writeln!(
            metrics,
            "{},{},{},{},{},{}",
            m.horizon, m.n_cells, m.median_abs_error, m.q1_abs_error, m.q3_abs_error, m.coverage95
        )?;
    }
    ctx.write_output("metrics.csv", metrics.as_bytes())?;
    ctx.finish("backtest")
}

// --- limit-check ---

pub fn run_limit_check(mut ctx: RunContext) -> CliResult<()> {
    let settings = ctx.config.limit_check.clone();
    let config = LimitCheckConfig {
        exposure_levels: settings.exposure_levels,
        n_draws: settings.n_draws,
        log_rate: settings.log_rate,
        sigma2: settings.sigma2,
        rng_seed: ctx.config.seed,
    };
    let distances = poisson_limit_check(&config)?;

    let mut csv = String::from("exposure,ks_distance\n");
    for d in &distances {
        writeln!(csv, "{},{}", d.exposure, d.ks_distance)?;
    }
    ctx.write_output("limit.csv", csv.as_bytes())?;
    ctx.finish("limit-check")
}
