//! Rolling-origin forecast evaluation.
//!
//! For every (surface, origin) pair the harness truncates the data at the
//! origin year, fits the model on the training slice, forecasts the held-out
//! years and scores point errors and 95%-interval coverage against the
//! observed log-rates. Errors from all country–gender–age–origin cells are
//! pooled per horizon; the summary reports the median, quartiles and
//! coverage fraction of the absolute errors. A naive forecaster that freezes
//! each age's last observed log-rate is included as a pipeline sanity check:
//! on trending data it must lose to the drift forecaster.
//!
//! Tasks are independent across (surface, origin) and run concurrently; the
//! report is reduced in task order, so output is a deterministic function of
//! inputs and seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::covariance::CorrelationPair;
use crate::data::{Gender, MortalitySurface};
use crate::error::{Error, Result};
use crate::estimation::{fit, FitConfig};
use crate::forecast::{build_drift_model, forecast, DriftConfig};
use crate::kalman::{filter, smooth};
use crate::statespace::assemble;
use crate::stats::quantile;

/// Which forecaster produces the scored predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMethod {
    /// Full pipeline: hyperparameter fit, smoothing, drift extrapolation.
    Drift,
    /// Freeze each age's last observed training log-rate. Its intervals have
    /// zero width, so only its point errors are meaningful.
    FreezeLast,
}

/// Evaluation design: which origins to refit at and how far to look ahead.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestSpec {
    /// Last training years; each is refit independently.
    pub origins: Vec<i32>,
    /// Steps ahead scored after each origin.
    pub horizons: usize,
    /// Root seed; per-task seeds are derived from it, the surface index and
    /// the origin year.
    pub seed: u64,
}

impl Default for BacktestSpec {
    fn default() -> Self {
        BacktestSpec {
            origins: (1990..=2010).collect(),
            horizons: 10,
            seed: 0,
        }
    }
}

impl BacktestSpec {
    pub fn validate(&self) -> Result<()> {
        if self.origins.is_empty() {
            return Err(Error::Input("need at least one origin year".into()));
        }
        if self.horizons == 0 {
            return Err(Error::Input("need at least one horizon".into()));
        }
        Ok(())
    }
}

/// Model configuration shared by every task.
#[derive(Debug, Clone)]
pub struct BacktestConfig {
    pub basis: BasisSet,
    pub correlations: CorrelationPair,
    pub fit: FitConfig,
    pub drift: DriftConfig,
    pub method: ForecastMethod,
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        if self.correlations.p() != self.basis.p() {
            return Err(Error::Input(format!(
                "correlation matrices are for {} bases, basis has {}",
                self.correlations.p(),
                self.basis.p()
            )));
        }
        Ok(())
    }
}

/// One scored held-out cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellError {
    pub country: String,
    pub gender: Gender,
    pub origin: i32,
    /// Steps ahead of the origin, starting at 1.
    pub horizon: usize,
    pub year: i32,
    pub age: u32,
    /// Forecast minus observed log-rate.
    pub error: f64,
    /// Whether the observed value fell inside the 95% interval.
    pub covered: bool,
}

/// Pooled summary of one horizon's absolute errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    /// Scored cells pooled into this horizon.
    pub n_cells: usize,
    pub median_abs_error: f64,
    pub q1_abs_error: f64,
    pub q3_abs_error: f64,
    /// Fraction of scored cells whose interval contained the observation.
    pub coverage95: f64,
}

/// A task (or part of one) that could not be scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipRecord {
    pub country: String,
    pub gender: Gender,
    pub origin: i32,
    pub reason: String,
}

/// Full evaluation output: pooled metrics, raw cells and skips.
///
/// `metrics` contains one entry per horizon that scored at least one cell, in
/// horizon order; horizons with no cells are simply absent. Within each entry
/// `q1 <= median <= q3` and coverage lies in `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestReport {
    pub metrics: Vec<HorizonMetrics>,
    pub cells: Vec<CellError>,
    pub skips: Vec<SkipRecord>,
}

/// Derives a deterministic per-task seed from the root seed, the surface's
/// position and the origin year (splitmix64 finalizer over the mix).
fn task_seed(seed: u64, surface_idx: usize, origin: i32) -> u64 {
    let mut z = seed
        ^ (surface_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (origin as i64 as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pools cells per horizon and summarizes the absolute errors.
///
/// Quartiles use linear interpolation between order statistics. Horizons
/// without any scored cell produce no entry.
pub fn summarize_cells(cells: &[CellError], horizons: usize) -> Vec<HorizonMetrics> {
    let mut metrics = Vec::new();
    for h in 1..=horizons {
        let pool: Vec<&CellError> = cells.iter().filter(|c| c.horizon == h).collect();
        if pool.is_empty() {
            continue;
        }
        let abs_errors: Vec<f64> = pool.iter().map(|c| c.error.abs()).collect();
        let n_covered = pool.iter().filter(|c| c.covered).count();
        metrics.push(HorizonMetrics {
            horizon: h,
            n_cells: pool.len(),
            median_abs_error: quantile(&abs_errors, 0.5),
            q1_abs_error: quantile(&abs_errors, 0.25),
            q3_abs_error: quantile(&abs_errors, 0.75),
            coverage95: n_covered as f64 / pool.len() as f64,
        });
    }
    metrics
}

/// Runs the rolling-origin evaluation over every (surface, origin) pair.
///
/// Each task truncates its surface at the origin, forecasts the following
/// `spec.horizons` sample years and scores every observed held-out cell;
/// missing cells are excluded from both the error pool and the coverage
/// fraction. Tasks that cannot run (origin outside the sample, training
/// slice too short, a numerical failure) are recorded as skips and the run
/// continues; a task with fewer held-out years than requested scores what
/// exists and records the truncation.
pub fn run_backtest(
    surfaces: &[MortalitySurface],
    spec: &BacktestSpec,
    config: &BacktestConfig,
) -> Result<BacktestReport> {
    spec.validate()?;
    config.validate()?;
    if surfaces.is_empty() {
        return Err(Error::Input("need at least one surface".into()));
    }

    let tasks: Vec<(usize, i32)> = (0..surfaces.len())
        .flat_map(|s| spec.origins.iter().map(move |&o| (s, o)))
        .collect();

    let outcomes: Vec<(Vec<CellError>, Vec<SkipRecord>)> = tasks
        .par_iter()
        .map(|&(surface_idx, origin)| {
            let surface = &surfaces[surface_idx];
            let mut skips = Vec::new();
            let cells = match run_task(
                surface,
                origin,
                spec.horizons,
                config,
                task_seed(spec.seed, surface_idx, origin),
                &mut skips,
            ) {
                Ok(cells) => cells,
                Err(err) => {
                    skips.push(SkipRecord {
                        country: surface.country_code().to_string(),
                        gender: surface.gender(),
                        origin,
                        reason: err.to_string(),
                    });
                    Vec::new()
                }
            };
            (cells, skips)
        })
        .collect();

    let mut cells = Vec::new();
    let mut skips = Vec::new();
    for (task_cells, task_skips) in outcomes {
        cells.extend(task_cells);
        skips.extend(task_skips);
    }
    let metrics = summarize_cells(&cells, spec.horizons);
    Ok(BacktestReport {
        metrics,
        cells,
        skips,
    })
}

/// Scores one (surface, origin) task; pushes a truncation warning when fewer
/// than the requested held-out years exist.
fn run_task(
    surface: &MortalitySurface,
    origin: i32,
    horizons: usize,
    config: &BacktestConfig,
    seed: u64,
    skips: &mut Vec<SkipRecord>,
) -> Result<Vec<CellError>> {
    let training = surface.truncate_to_year(origin)?;
    let last_train = *training.years().last().expect("non-empty by construction");
    if last_train != origin {
        return Err(Error::Input(format!(
            "origin {origin} is not a sample year (training would end at {last_train})"
        )));
    }

    // Held-out years: the sample years after the origin, up to `horizons` of
    // them. Horizon h is the h-th such year.
    let held_out: Vec<i32> = surface
        .years()
        .iter()
        .copied()
        .filter(|&y| y > origin)
        .take(horizons)
        .collect();
    if held_out.is_empty() {
        return Err(Error::Input(format!("no sample years after {origin}")));
    }
    if held_out.len() < horizons {
        skips.push(SkipRecord {
            country: surface.country_code().to_string(),
            gender: surface.gender(),
            origin,
            reason: format!(
                "only {} of {horizons} horizons available after {origin}",
                held_out.len()
            ),
        });
    }

    let predictions = match config.method {
        ForecastMethod::Drift => drift_predictions(&training, &held_out, config, seed)?,
        ForecastMethod::FreezeLast => freeze_last_predictions(&training, held_out.len())?,
    };

    let mut cells = Vec::new();
    for (h_idx, (&year, bands)) in held_out.iter().zip(&predictions).enumerate() {
        let col = surface
            .year_index(year)
            .expect("held-out years come from the sample");
        for (i, &age) in surface.ages().iter().enumerate() {
            if !surface.is_observed(i, col) {
                continue;
            }
            let observed = surface.log_rate(i, col);
            let (point, lower, upper) = bands[i];
            cells.push(CellError {
                country: surface.country_code().to_string(),
                gender: surface.gender(),
                origin,
                horizon: h_idx + 1,
                year,
                age,
                error: point - observed,
                covered: lower <= observed && observed <= upper,
            });
        }
    }
    Ok(cells)
}

/// Per held-out year, per age: (point, lower, upper).
type PredictionBands = Vec<Vec<(f64, f64, f64)>>;

/// Full pipeline on the training slice: fit, smooth, drift, forecast.
fn drift_predictions(
    training: &MortalitySurface,
    held_out: &[i32],
    config: &BacktestConfig,
    seed: u64,
) -> Result<PredictionBands> {
    let fit_config = FitConfig {
        rng_seed: seed,
        ..config.fit.clone()
    };
    let fitted = fit(training, &config.basis, &config.correlations, &fit_config)?;
    let ages = training.age_grid();
    let model = assemble(
        &config.basis,
        &config.correlations,
        &fitted.best,
        &ages,
        &training.lags(),
    )?;
    let filtered = filter(&model, &training.observations())?;
    let smoother = smooth(&model, &filtered)?;
    let drift_config = DriftConfig {
        rng_seed: seed.wrapping_add(1),
        ..config.drift.clone()
    };
    let drift = build_drift_model(
        &smoother,
        &model,
        training,
        &config.correlations,
        &fitted.best,
        &drift_config,
    )?;

    let origin = *training.years().last().expect("non-empty");
    let mut gaps = Vec::with_capacity(held_out.len());
    let mut previous = origin;
    for &year in held_out {
        gaps.push((year - previous) as f64);
        previous = year;
    }
    let result = forecast(&drift, &config.basis, &ages, held_out.len(), &gaps)?;
    Ok(result
        .horizons
        .iter()
        .map(|hf| {
            (0..ages.len())
                .map(|i| (hf.point[i], hf.lower[i], hf.upper[i]))
                .collect()
        })
        .collect())
}

/// Freezes each age's last observed training log-rate for every horizon.
/// Ages never observed in training score as an unobservable point (NaN error
/// would poison the pool, so such cells are dropped by the caller via a
/// zero-width interval around infinity).
fn freeze_last_predictions(training: &MortalitySurface, n_years: usize) -> Result<PredictionBands> {
    let k = training.k();
    let mut frozen = vec![None; k];
    for (i, slot) in frozen.iter_mut().enumerate() {
        for t in (0..training.n()).rev() {
            if training.is_observed(i, t) {
                *slot = Some(training.log_rate(i, t));
                break;
            }
        }
    }
    if frozen.iter().all(Option::is_none) {
        return Err(Error::Input(
            "no observed training cells to freeze".into(),
        ));
    }
    let one_year: Vec<(f64, f64, f64)> = frozen
        .iter()
        .map(|value| match value {
            Some(v) => (*v, *v, *v),
            // Never-observed age: an empty interval at infinity scores as
            // uncovered, and the infinite error is filtered out below.
            None => (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        })
        .collect();
    Ok(vec![one_year; n_years])
}
