//! Multi-horizon forecasting through a random-walk-plus-drift layer on the
//! spline coefficients.
//!
//! The smoothed state carries, per spline, a level path and its local
//! derivative. Forecasting distills the recent derivative paths into a
//! fixed drift vector (a per-spline median over the most recent years,
//! robust to single-year shocks), estimates how noisy the coefficient walk,
//! the drift and the observations are from those same years, and then rolls
//! coefficients and uncertainty forward with an exact linear-Gaussian
//! recursion. Predictive intervals come from the propagated covariance plus
//! the observation noise; no sampling is involved at forecast time.
//!
//! Forecasting directly from the fitted model's own state recursion is kept
//! as a comparison mode ([`forecast_predictive`]); the drift layer is the
//! production path because the full recursion lets coefficient uncertainty
//! balloon at medium horizons.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::{design_matrix, BasisSet};
use crate::covariance::CorrelationPair;
use crate::data::MortalitySurface;
use crate::error::{Error, Result};
use crate::kalman::{fast_loglik, sample_states, SmootherResult};
use crate::optim::{latin_hypercube, nelder_mead, NelderMeadOptions};
use crate::statespace::{
    build_step, GaussianBelief, HyperParams, StateLayout, StateSpaceModel, TransitionStep,
};
use crate::stats::{median, sample_variance};

/// Two-sided 95% Gaussian quantile used for predictive bounds.
pub const Z95: f64 = 1.959964;

/// Controls for [`build_drift_model`].
#[derive(Debug, Clone)]
pub struct DriftConfig {
    /// Years of smoothed derivatives pooled into the drift median; the
    /// variance estimation runs on these years' observations and the drift
    /// initialization uses the `window` years before them.
    pub window: usize,
    /// Trajectory draws used to quantify the drift-median uncertainty.
    pub sim_draws: usize,
    pub rng_seed: u64,
    /// Optimizer starts for the three-variance estimation.
    pub n_starts: usize,
    /// Iteration cap per start.
    pub max_iters: usize,
    /// Log-space box for (walk, drift, observation) variances.
    pub log_bounds: [(f64, f64); 3],
}

impl Default for DriftConfig {
    fn default() -> Self {
        DriftConfig {
            window: 25,
            sim_draws: 200,
            rng_seed: 0,
            n_starts: 6,
            max_iters: 200,
            log_bounds: [(-20.0, 5.0); 3],
        }
    }
}

/// Frozen inputs of the forecast recursion.
#[derive(Debug, Clone)]
pub struct DriftModel {
    /// Smoothed coefficient means at the last observed year (`p`).
    pub beta_start: DVector<f64>,
    /// Per-spline drift: median smoothed derivative over the window (`p`).
    pub drift_start: DVector<f64>,
    /// Per-step walk covariance: walk variance times the level correlation.
    pub w: DMatrix<f64>,
    /// Walk variance (scale of `w`).
    pub sigma2_omega: f64,
    /// Drift-evolution variance.
    pub sigma2_delta: f64,
    /// Observation variance entering the interval width.
    pub sigma2_psi: f64,
    /// Time-scale carried over from the fitted model.
    pub lambda_hat: f64,
    /// Inclusive year span whose observations fed the variance estimation.
    pub variance_window_years: (i32, i32),
    /// Inclusive year span whose derivative medians initialized the drift.
    pub init_window_years: (i32, i32),
    /// Drift initialization: median derivative over the init window (`p`).
    pub mu_delta_init: DVector<f64>,
    /// Draw-based variance of that median statistic (`p`).
    pub sigma2_delta_init: DVector<f64>,
}

impl DriftModel {
    /// Number of spline coefficients.
    pub fn p(&self) -> usize {
        self.beta_start.len()
    }
}

/// Point forecast and 95% band for one horizon, age-resolved, plus the
/// coefficient means behind it.
#[derive(Debug, Clone)]
pub struct HorizonForecast {
    /// Steps ahead of the last observed year, starting at 1.
    pub horizon: usize,
    /// Forecast log-rates per age (`k`).
    pub point: DVector<f64>,
    /// Lower 95% bound per age.
    pub lower: DVector<f64>,
    /// Upper 95% bound per age.
    pub upper: DVector<f64>,
    /// Forecast coefficient means (`p`).
    pub coefficients: DVector<f64>,
}

/// Forecasts for horizons `1..=n`, in order.
#[derive(Debug, Clone)]
pub struct ForecastResult {
    pub horizons: Vec<HorizonForecast>,
}

/// Per-spline median of the derivative coordinate of a belief sequence over
/// an index range.
fn median_derivatives(beliefs: &[GaussianBelief], p: usize, range: std::ops::Range<usize>) -> DVector<f64> {
    let layout = StateLayout::new(p);
    DVector::from_fn(p, |j, _| {
        let values: Vec<f64> = range
            .clone()
            .map(|s| beliefs[s].mean[layout.derivative(j)])
            .collect();
        median(&values)
    })
}

/// Builds the drift layer from a smoothed fit.
///
/// The drift is the per-spline median of the smoothed derivative means over
/// the last `window` years. Its initialization for the variance-estimation
/// stage uses the `window` years before that: the median derivative there
/// (`mu_delta_init`) and, across seeded draws from the smoothing
/// distribution, the sample variance of that same median statistic
/// (`sigma2_delta_init`). The walk, drift and observation variances are
/// then estimated by maximum marginal likelihood of the walk-plus-drift
/// model on the last `window` years of observations, holding the fitted
/// time-scale fixed; the coefficient state at the window start is
/// initialized by projecting the smoothed state one step ahead with the
/// model's own predictive covariance.
pub fn build_drift_model(
    smoother: &SmootherResult,
    model: &StateSpaceModel,
    surface: &MortalitySurface,
    correlations: &CorrelationPair,
    hp: &HyperParams,
    config: &DriftConfig,
) -> Result<DriftModel> {
    let n = surface.n();
    let w = config.window;
    if w < 2 {
        return Err(Error::Input("drift window must span at least 2 years".into()));
    }
    if config.sim_draws < 2 {
        return Err(Error::Input(
            "need at least 2 draws to estimate the drift variance".into(),
        ));
    }
    if n < 2 * w {
        return Err(Error::Input(format!(
            "drift construction needs at least {} years (twice the {}-year window), surface has {n}",
            2 * w,
            w
        )));
    }
    if smoother.smoothed.len() != n || model.n_times() != n {
        return Err(Error::Input(
            "smoother, model and surface cover different numbers of years".into(),
        ));
    }
    let d = model.state_dim();
    if !d.is_multiple_of(3) {
        return Err(Error::Input(format!(
            "state dimension {d} is not a multiple of 3"
        )));
    }
    let p = d / 3;
    if correlations.p() != p {
        return Err(Error::Input(format!(
            "correlation matrices are for {} bases, model has {p}",
            correlations.p()
        )));
    }
    let layout = StateLayout::new(p);
    let k = model.n_obs();

    // Drift and its initialization from the two adjacent windows.
    let beta_start = DVector::from_fn(p, |j, _| {
        smoother.smoothed[n - 1].mean[layout.level(j)]
    });
    let drift_start = median_derivatives(&smoother.smoothed, p, (n - w)..n);
    let mu_delta_init = median_derivatives(&smoother.smoothed, p, (n - 2 * w)..(n - w));

    // Uncertainty of the init-window median across smoothing-distribution
    // draws.
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let draws = sample_states(
        model,
        &smoother.filtered,
        &smoother.predicted,
        config.sim_draws,
        &mut rng,
    )?;
    let mut sigma2_delta_init = DVector::zeros(p);
    for j in 0..p {
        let medians: Vec<f64> = draws
            .iter()
            .map(|trajectory| {
                let values: Vec<f64> = ((n - 2 * w)..(n - w))
                    .map(|s| trajectory[s][layout.derivative(j)])
                    .collect();
                median(&values)
            })
            .collect();
        sigma2_delta_init[j] = sample_variance(&medians);
    }

    // Coefficient belief at the window start: one-step projection of the
    // smoothed state, with the filter's own predictive covariance.
    let start = n - w;
    let projected = &model.steps[start - 1].t * &smoother.smoothed[start - 1].mean;
    let beta_init_mean = DVector::from_fn(p, |j, _| projected[layout.level(j)]);
    let pred_cov = &smoother.predicted[start].cov;
    let beta_init_cov = DMatrix::from_fn(p, p, |j, l| pred_cov[(layout.level(j), layout.level(l))]);

    // Observation design restricted to the level columns.
    let g = DMatrix::from_fn(k, p, |i, j| model.z[(i, layout.level(j))]);

    let window_gaps: Vec<f64> = surface.lags()[start..n - 1].to_vec();
    let window_obs = surface.observations().split_off(start);

    let mut initial_mean = DVector::zeros(2 * p);
    initial_mean.rows_mut(0, p).copy_from(&beta_init_mean);
    initial_mean.rows_mut(p, p).copy_from(&mu_delta_init);
    let mut initial_cov = DMatrix::zeros(2 * p, 2 * p);
    initial_cov
        .view_mut((0, 0), (p, p))
        .copy_from(&beta_init_cov);
    for j in 0..p {
        initial_cov[(p + j, p + j)] = sigma2_delta_init[j];
    }
    // Smoothed covariances are only symmetric to round-off; force it so the
    // belief constructor of the window model accepts the block.
    for a in 0..2 * p {
        for b in 0..a {
            let avg = 0.5 * (initial_cov[(a, b)] + initial_cov[(b, a)]);
            initial_cov[(a, b)] = avg;
            initial_cov[(b, a)] = avg;
        }
    }
    let initial = GaussianBelief::new(initial_mean, initial_cov)?;

    let (sigma2_omega, sigma2_delta, sigma2_psi) = estimate_window_variances(
        &g,
        correlations,
        hp.lambda,
        &window_gaps,
        &window_obs,
        &initial,
        config,
    )?;

    let years = surface.years();
    Ok(DriftModel {
        beta_start,
        drift_start,
        w: sigma2_omega * correlations.rho_beta(),
        sigma2_omega,
        sigma2_delta,
        sigma2_psi,
        lambda_hat: hp.lambda,
        variance_window_years: (years[start], years[n - 1]),
        init_window_years: (years[n - 2 * w], years[start - 1]),
        mu_delta_init,
        sigma2_delta_init,
    })
}

/// Transition and noise of the walk-plus-drift model for one time gap.
fn walk_step(
    p: usize,
    lambda: f64,
    gap: f64,
    sigma2_omega: f64,
    sigma2_delta: f64,
    rho_beta: &DMatrix<f64>,
) -> TransitionStep {
    let mut t = DMatrix::identity(2 * p, 2 * p);
    for j in 0..p {
        t[(j, p + j)] = lambda * gap;
    }
    let mut q = DMatrix::zeros(2 * p, 2 * p);
    q.view_mut((0, 0), (p, p))
        .copy_from(&(sigma2_omega * rho_beta));
    for j in 0..p {
        q[(p + j, p + j)] = sigma2_delta;
    }
    TransitionStep { t, q }
}

/// Maximum marginal likelihood for the three window variances, log-space
/// multi-start simplex, no penalty, selection by likelihood with ties going
/// to the lowest start index.
fn estimate_window_variances(
    g: &DMatrix<f64>,
    correlations: &CorrelationPair,
    lambda: f64,
    gaps: &[f64],
    observations: &[crate::kalman::ObservationVector],
    initial: &GaussianBelief,
    config: &DriftConfig,
) -> Result<(f64, f64, f64)> {
    let p = correlations.p();
    let k = g.nrows();
    let bounds = config.log_bounds;
    for &(lo, hi) in &bounds {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Input(format!("invalid log bounds ({lo}, {hi})")));
        }
    }
    if config.n_starts == 0 {
        return Err(Error::Input("n_starts must be at least 1".into()));
    }

    let mut z = DMatrix::zeros(k, 2 * p);
    z.view_mut((0, 0), (k, p)).copy_from(g);

    let objective = |theta: &[f64]| -> f64 {
        if theta
            .iter()
            .zip(&bounds)
            .any(|(&t, &(lo, hi))| t < lo || t > hi)
        {
            return f64::NEG_INFINITY;
        }
        let (s2_omega, s2_delta, s2_psi) = (theta[0].exp(), theta[1].exp(), theta[2].exp());
        let steps: Vec<TransitionStep> = gaps
            .iter()
            .map(|&gap| walk_step(p, lambda, gap, s2_omega, s2_delta, correlations.rho_beta()))
            .collect();
        let model = StateSpaceModel {
            z: z.clone(),
            h_diag: DVector::from_element(k, s2_psi),
            steps,
            initial: initial.clone(),
            lags: gaps.to_vec(),
        };
        match fast_loglik(&model, observations) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(1));
    let starts = latin_hypercube(&mut rng, config.n_starts, &bounds);
    let options = NelderMeadOptions {
        max_iters: config.max_iters,
        ..NelderMeadOptions::default()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for start in &starts {
        let run = nelder_mead(|theta| -objective(theta), start, &options);
        let value = objective(&run.x);
        let improves = match &best {
            None => value.is_finite(),
            Some((best_value, _)) => value > *best_value,
        };
        if improves {
            best = Some((value, run.x));
        }
    }
    let (_, theta) = best.ok_or_else(|| {
        Error::Estimation(format!(
            "all {} starts of the window variance estimation failed",
            config.n_starts
        ))
    })?;
    Ok((theta[0].exp(), theta[1].exp(), theta[2].exp()))
}

/// Rolls the walk-plus-drift recursion forward and projects it through the
/// basis.
///
/// Coefficient means advance by the drift scaled with the time-scale and the
/// actual gap per horizon; the covariance accumulates the walk noise each
/// step plus the compounding drift uncertainty. Intervals are the Gaussian
/// 95% band of the projected coefficients plus observation noise. `ages`
/// are the evaluation points of the reported per-age vectors; `lags` must
/// supply one future gap per horizon.
pub fn forecast(
    drift: &DriftModel,
    basis: &BasisSet,
    ages: &[f64],
    horizons: usize,
    lags: &[f64],
) -> Result<ForecastResult> {
    if horizons == 0 {
        return Err(Error::Input("need at least one horizon".into()));
    }
    if lags.len() < horizons {
        return Err(Error::Input(format!(
            "{horizons} horizons need {horizons} future gaps, got {}",
            lags.len()
        )));
    }
    if lags.iter().take(horizons).any(|&gap| gap.is_nan() || gap <= 0.0) {
        return Err(Error::Domain("future gaps must be positive".into()));
    }
    let p = drift.p();
    if basis.p() != p {
        return Err(Error::Input(format!(
            "basis has {} splines, drift model has {p}",
            basis.p()
        )));
    }
    if drift.w.nrows() != p || drift.w.ncols() != p {
        return Err(Error::Input("walk covariance has wrong shape".into()));
    }
    let design = design_matrix(basis, ages)?;
    let g = design.matrix();
    let k = g.nrows();

    let mut mean = DVector::zeros(2 * p);
    mean.rows_mut(0, p).copy_from(&drift.beta_start);
    mean.rows_mut(p, p).copy_from(&drift.drift_start);
    let mut cov = DMatrix::zeros(2 * p, 2 * p);

    let mut q = DMatrix::zeros(2 * p, 2 * p);
    q.view_mut((0, 0), (p, p)).copy_from(&drift.w);
    for j in 0..p {
        q[(p + j, p + j)] = drift.sigma2_delta;
    }

    let mut per_horizon = Vec::with_capacity(horizons);
    for (h, &gap) in lags.iter().take(horizons).enumerate() {
        let mut t = DMatrix::identity(2 * p, 2 * p);
        for j in 0..p {
            t[(j, p + j)] = drift.lambda_hat * gap;
        }
        mean = &t * mean;
        cov = &t * cov * t.transpose() + &q;

        let beta_mean = mean.rows(0, p).into_owned();
        let beta_cov = cov.view((0, 0), (p, p)).into_owned();
        let point = g * &beta_mean;
        let mut lower = DVector::zeros(k);
        let mut upper = DVector::zeros(k);
        for i in 0..k {
            let row = g.row(i);
            let var = (row * &beta_cov * row.transpose())[(0, 0)] + drift.sigma2_psi;
            let half = Z95 * var.max(0.0).sqrt();
            lower[i] = point[i] - half;
            upper[i] = point[i] + half;
        }
        per_horizon.push(HorizonForecast {
            horizon: h + 1,
            point,
            lower,
            upper,
            coefficients: beta_mean,
        });
    }
    Ok(ForecastResult {
        horizons: per_horizon,
    })
}

/// Comparison mode: continues the fitted model's own state recursion past
/// the data instead of using the drift layer.
///
/// Starting from the last filtered belief, each horizon applies the full
/// three-component transition and noise, then projects to the observation
/// space; intervals add the fitted observation variance. Medium-horizon
/// bands grow much faster than under the drift layer, which is why this
/// path is not the default.
pub fn forecast_predictive(
    model: &StateSpaceModel,
    last_filtered: &GaussianBelief,
    correlations: &CorrelationPair,
    hp: &HyperParams,
    horizons: usize,
    lags: &[f64],
) -> Result<ForecastResult> {
    if horizons == 0 {
        return Err(Error::Input("need at least one horizon".into()));
    }
    if lags.len() < horizons {
        return Err(Error::Input(format!(
            "{horizons} horizons need {horizons} future gaps, got {}",
            lags.len()
        )));
    }
    let d = model.state_dim();
    if last_filtered.dim() != d {
        return Err(Error::Input(format!(
            "belief has dimension {}, model expects {d}",
            last_filtered.dim()
        )));
    }
    if !d.is_multiple_of(3) {
        return Err(Error::Input(format!(
            "state dimension {d} is not a multiple of 3"
        )));
    }
    let p = d / 3;
    let layout = StateLayout::new(p);
    let k = model.n_obs();

    let mut belief = last_filtered.clone();
    let mut per_horizon = Vec::with_capacity(horizons);
    for (h, &gap) in lags.iter().take(horizons).enumerate() {
        let step = build_step(hp, correlations, &layout, gap)?;
        let mean = &step.t * &belief.mean;
        let cov = &step.t * &belief.cov * step.t.transpose() + &step.q;
        belief = GaussianBelief { mean, cov };

        let point = &model.z * &belief.mean;
        let zs = &model.z * &belief.cov;
        let mut lower = DVector::zeros(k);
        let mut upper = DVector::zeros(k);
        for i in 0..k {
            let var = zs.row(i).dot(&model.z.row(i)) + model.h_diag[i];
            let half = Z95 * var.max(0.0).sqrt();
            lower[i] = point[i] - half;
            upper[i] = point[i] + half;
        }
        per_horizon.push(HorizonForecast {
            horizon: h + 1,
            point: point.clone(),
            lower,
            upper,
            coefficients: DVector::from_fn(p, |j, _| belief.mean[layout.level(j)]),
        });
    }
    Ok(ForecastResult {
        horizons: per_horizon,
    })
}
