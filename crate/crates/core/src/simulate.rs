//! Synthetic surface generation from the generative model.
//!
//! Surfaces are drawn exactly from the model: an initial state from the
//! configured belief, states propagated through the discrete transition with
//! process noise, and observations emitted either as Gaussian log-rates or
//! as Poisson death counts around the latent rate. Ground-truth states are
//! always returned so downstream tests compare against them directly instead
//! of re-deriving them.
//!
//! The module also hosts the large-exposure limit check: with counts
//! `d ~ Poisson(E·m̄)` and `log m̄ ~ N(f, σ²)`, the observed log-rate
//! `log(d/E)` converges in distribution to `N(f, σ²)` as exposure grows.
//! [`poisson_limit_check`] measures that convergence empirically.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use statrs::distribution::ContinuousCDF;

use crate::basis::{design_matrix, BasisSet};
use crate::covariance::CorrelationPair;
use crate::data::{Gender, MortalitySurface};
use crate::error::{Error, Result};
use crate::linalg::{sample_mvn, sampling_factor};
use crate::statespace::{build_step, GaussianBelief, HyperParams, StateLayout};

/// Observation channel for simulated surfaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimMode {
    /// Log-rates observed directly with additive Gaussian noise.
    Gaussian,
    /// Death counts drawn from `Poisson(E·m̄)` with a log-normal latent rate;
    /// the surface records `log(d/E)` and masks zero-count cells.
    Poisson,
}

/// Exposures to risk for poisson mode: one value for every cell, or a full
/// age-by-year grid.
#[derive(Debug, Clone)]
pub enum ExposureSpec {
    Constant(f64),
    Grid(DMatrix<f64>),
}

impl ExposureSpec {
    fn value(&self, age_idx: usize, year_idx: usize) -> f64 {
        match self {
            ExposureSpec::Constant(e) => *e,
            ExposureSpec::Grid(grid) => grid[(age_idx, year_idx)],
        }
    }

    fn validate(&self, k: usize, n: usize) -> Result<()> {
        match self {
            ExposureSpec::Constant(e) => {
                if !e.is_finite() || *e <= 0.0 {
                    return Err(Error::Domain(format!("exposure must be positive, got {e}")));
                }
            }
            ExposureSpec::Grid(grid) => {
                if grid.nrows() != k || grid.ncols() != n {
                    return Err(Error::Input(format!(
                        "exposure grid is {}x{}, surface is {k}x{n}",
                        grid.nrows(),
                        grid.ncols()
                    )));
                }
                if grid.iter().any(|e| !e.is_finite() || *e <= 0.0) {
                    return Err(Error::Domain("exposure grid must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Full description of a simulated panel.
///
/// Unlike fitting, simulation tolerates zero variances (the degenerate
/// noiseless system is a useful fixture), so `hp` is range-checked here
/// rather than through its strict constructor. In poisson mode the
/// observation-variance slot acts as the dispersion of the latent log-rate
/// around the smooth surface.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub hp: HyperParams,
    pub basis: BasisSet,
    pub correlations: CorrelationPair,
    pub n_years: usize,
    pub start_year: i32,
    pub ages: Vec<u32>,
    pub exposures: ExposureSpec,
    pub rng_seed: u64,
    pub mode: SimMode,
    /// Belief the first state is drawn from; zero covariance pins it exactly.
    pub initial: GaussianBelief,
    pub country_code: String,
    pub gender: Gender,
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2_obs", self.hp.sigma2_obs),
            ("sigma2_beta", self.hp.sigma2_beta),
            ("sigma2_a", self.hp.sigma2_a),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Domain(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if !self.hp.lambda.is_finite() || self.hp.lambda <= 0.0 {
            return Err(Error::Domain(format!(
                "lambda must be positive, got {}",
                self.hp.lambda
            )));
        }
        if self.n_years == 0 {
            return Err(Error::Input("n_years must be at least 1".into()));
        }
        if self.ages.is_empty() {
            return Err(Error::Input("age grid must be nonempty".into()));
        }
        if self.ages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("ages must be strictly increasing".into()));
        }
        let dim = StateLayout::new(self.basis.p()).dim();
        if self.initial.dim() != dim {
            return Err(Error::Input(format!(
                "initial belief has dimension {}, model needs {dim}",
                self.initial.dim()
            )));
        }
        if self.correlations.p() != self.basis.p() {
            return Err(Error::Input(
                "correlation matrices do not match the basis size".into(),
            ));
        }
        if self.mode == SimMode::Poisson {
            self.exposures.validate(self.ages.len(), self.n_years)?;
        }
        Ok(())
    }
}

/// Draws one surface and its ground-truth state path.
///
/// The state recursion uses annual steps: the first state comes from the
/// initial belief, each successor is the transition applied to its
/// predecessor plus process noise. Observations per cell follow the
/// configured mode; in poisson mode, cells whose simulated death count is
/// zero are masked missing (their log-rate is undefined), matching the
/// ingestion policy for real tables.
pub fn simulate_surface(config: &SimConfig) -> Result<(MortalitySurface, Vec<DVector<f64>>)> {
    config.validate()?;
    let p = config.basis.p();
    let layout = StateLayout::new(p);
    let k = config.ages.len();
    let n = config.n_years;
    let age_grid: Vec<f64> = config.ages.iter().map(|&a| a as f64).collect();
    let design = design_matrix(&config.basis, &age_grid)?;

    let step = build_step(&config.hp, &config.correlations, &layout, 1.0)?;
    let process_factor = sampling_factor(&step.q);
    let initial_factor = sampling_factor(&config.initial.cov);
    let zero_mean = DVector::zeros(layout.dim());

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut states = Vec::with_capacity(n);
    let mut x = sample_mvn(&mut rng, &config.initial.mean, &initial_factor);
    states.push(x.clone());
    for _ in 1..n {
        let noise = sample_mvn(&mut rng, &zero_mean, &process_factor);
        x = &step.t * &x + noise;
        states.push(x.clone());
    }

    // Latent smooth surface: basis expansion of the level coordinates.
    let mut latent = DMatrix::zeros(k, n);
    for (j, state) in states.iter().enumerate() {
        for i in 0..k {
            let mut f = 0.0;
            for b in 0..p {
                f += design.matrix()[(i, b)] * state[layout.level(b)];
            }
            latent[(i, j)] = f;
        }
    }

    let years: Vec<i32> = (0..n).map(|s| config.start_year + s as i32).collect();
    let noise_sd = config.hp.sigma2_obs.sqrt();
    let cell_noise = if noise_sd > 0.0 {
        Some(Normal::new(0.0, noise_sd).map_err(|e| Error::Domain(e.to_string()))?)
    } else {
        None
    };

    let (log_rates, observed, deaths, exposures) = match config.mode {
        SimMode::Gaussian => {
            let mut log_rates = latent;
            if let Some(noise) = &cell_noise {
                for j in 0..n {
                    for i in 0..k {
                        log_rates[(i, j)] += noise.sample(&mut rng);
                    }
                }
            }
            (log_rates, DMatrix::from_element(k, n, true), None, None)
        }
        SimMode::Poisson => {
            let mut log_rates = DMatrix::from_element(k, n, f64::NAN);
            let mut observed = DMatrix::from_element(k, n, false);
            let mut deaths = DMatrix::from_element(k, n, f64::NAN);
            let mut exposure_grid = DMatrix::from_element(k, n, f64::NAN);
            for j in 0..n {
                for i in 0..k {
                    let mut log_mbar = latent[(i, j)];
                    if let Some(noise) = &cell_noise {
                        log_mbar += noise.sample(&mut rng);
                    }
                    let e = config.exposures.value(i, j);
                    let poisson = Poisson::new(e * log_mbar.exp())
                        .map_err(|err| Error::Domain(err.to_string()))?;
                    let d: f64 = poisson.sample(&mut rng);
                    deaths[(i, j)] = d;
                    exposure_grid[(i, j)] = e;
                    if d > 0.0 {
                        log_rates[(i, j)] = (d / e).ln();
                        observed[(i, j)] = true;
                    }
                }
            }
            (log_rates, observed, Some(deaths), Some(exposure_grid))
        }
    };

    let surface = MortalitySurface::from_grids(
        config.country_code.clone(),
        config.gender,
        config.ages.clone(),
        years,
        log_rates,
        observed,
        deaths,
        exposures,
    )?;
    Ok((surface, states))
}

/// Configuration for the large-exposure limit check.
#[derive(Debug, Clone)]
pub struct LimitCheckConfig {
    /// Exposure levels, strictly increasing.
    pub exposure_levels: Vec<f64>,
    /// Monte Carlo draws per level.
    pub n_draws: usize,
    /// Fixed latent log-rate `f`.
    pub log_rate: f64,
    /// Variance of the latent log-rate around `f`.
    pub sigma2: f64,
    pub rng_seed: u64,
}

/// Kolmogorov–Smirnov distance at one exposure level.
#[derive(Debug, Clone, Copy)]
pub struct LimitDistance {
    pub exposure: f64,
    pub ks_distance: f64,
}

/// Measures how close the observed log-rate distribution is to its
/// large-exposure log-normal limit.
///
/// For each exposure level `E`, draws `n_draws` samples of `log(d/E)` where
/// `log m̄ ~ N(f, σ²)` and `d ~ Poisson(E·m̄)`, then reports the
/// Kolmogorov–Smirnov distance between their empirical distribution and
/// `N(f, σ²)`. Zero counts yield `-∞` samples, which stay in the empirical
/// distribution (they only ever widen the distance). Distances shrink as
/// exposure grows; the limit guarantees convergence to zero.
pub fn poisson_limit_check(config: &LimitCheckConfig) -> Result<Vec<LimitDistance>> {
    if config.exposure_levels.is_empty() {
        return Err(Error::Input("need at least one exposure level".into()));
    }
    if config
        .exposure_levels
        .windows(2)
        .any(|w| w[0] >= w[1])
    {
        return Err(Error::Input("exposure levels must be increasing".into()));
    }
    if config.exposure_levels.iter().any(|&e| e <= 0.0) {
        return Err(Error::Domain("exposure levels must be positive".into()));
    }
    if config.n_draws == 0 {
        return Err(Error::Input("n_draws must be at least 1".into()));
    }
    if !(config.sigma2.is_finite() && config.sigma2 > 0.0) {
        return Err(Error::Domain(format!(
            "sigma2 must be positive, got {}",
            config.sigma2
        )));
    }

    let sigma = config.sigma2.sqrt();
    let mut results = Vec::with_capacity(config.exposure_levels.len());
    for (idx, &exposure) in config.exposure_levels.iter().enumerate() {
        // Independent, reproducible stream per level.
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_add(idx as u64));
        let samples = draw_log_ratios(&mut rng, exposure, config.n_draws, config.log_rate, sigma)?;
        let ks_distance = ks_distance_to_normal(&samples, config.log_rate, sigma)?;
        results.push(LimitDistance {
            exposure,
            ks_distance,
        });
    }
    Ok(results)
}

/// Draws `n` observed log-rates at one exposure level; zero counts map to
/// `-∞`. `sigma = 0` pins the latent rate at `exp(f)` exactly.
fn draw_log_ratios(
    rng: &mut ChaCha8Rng,
    exposure: f64,
    n: usize,
    f: f64,
    sigma: f64,
) -> Result<Vec<f64>> {
    let latent_noise = if sigma > 0.0 {
        Some(Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let log_mbar = f + latent_noise.as_ref().map_or(0.0, |dist| dist.sample(rng));
        let poisson =
            Poisson::new(exposure * log_mbar.exp()).map_err(|e| Error::Domain(e.to_string()))?;
        let d: f64 = poisson.sample(rng);
        samples.push(if d > 0.0 {
            (d / exposure).ln()
        } else {
            f64::NEG_INFINITY
        });
    }
    Ok(samples)
}

/// Two-sided Kolmogorov–Smirnov distance between an empirical sample (which
/// may contain `-∞`) and `N(f, sigma²)`. Evaluated at every jump of the
/// empirical distribution; the `-∞` mass contributes through the step height
/// it shifts onto the finite samples.
fn ks_distance_to_normal(samples: &[f64], f: f64, sigma: f64) -> Result<f64> {
    let normal = statrs::distribution::Normal::new(f, sigma)
        .map_err(|e| Error::Domain(e.to_string()))?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut sup = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = if x == f64::NEG_INFINITY {
            0.0
        } else {
            normal.cdf(x)
        };
        let before = i as f64 / n;
        let after = (i + 1) as f64 / n;
        sup = sup.max((cdf - before).abs()).max((cdf - after).abs());
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_basis;
    use crate::covariance::CorrelationPair;
    use crate::estimation; // for log-bound constants in the decile test
    use crate::kalman::fast_loglik;
    use crate::statespace::assemble;
    use rand::Rng;

    fn small_basis() -> BasisSet {
        build_basis(&[0.0, 5.0, 10.0], 3).unwrap()
    }

    fn identity_correlations(p: usize) -> CorrelationPair {
        CorrelationPair::identity(p)
    }

    fn base_config(mode: SimMode, hp: HyperParams, initial: GaussianBelief) -> SimConfig {
        let basis = small_basis();
        let p = basis.p();
        SimConfig {
            hp,
            basis,
            correlations: identity_correlations(p),
            n_years: 12,
            start_year: 1950,
            ages: (0..=10).collect(),
            exposures: ExposureSpec::Constant(1.0e6),
            rng_seed: 7,
            mode,
            initial,
            country_code: "SIM".into(),
            gender: Gender::Female,
        }
    }

    fn pinned_initial(p: usize, levels: &[f64]) -> GaussianBelief {
        let layout = StateLayout::new(p);
        let mut mean = DVector::zeros(layout.dim());
        for (j, &v) in levels.iter().enumerate() {
            mean[layout.level(j)] = v;
        }
        GaussianBelief::new(mean, DMatrix::zeros(layout.dim(), layout.dim())).unwrap()
    }

    #[test]
    fn noiseless_system_is_constant_over_time() {
        let hp = HyperParams {
            sigma2_obs: 0.0,
            sigma2_beta: 0.0,
            sigma2_a: 0.0,
            lambda: 1.3,
        };
        let levels = [-4.0, -3.5, -3.0, -2.5, -2.0];
        let initial = pinned_initial(5, &levels);
        let config = base_config(SimMode::Gaussian, hp, initial);
        let (surface, states) = simulate_surface(&config).unwrap();
        // Zero derivatives and accelerations make the state a fixed point of
        // the transition, so every year equals the first, bit for bit.
        for j in 1..surface.n() {
            for i in 0..surface.k() {
                assert_eq!(
                    surface.log_rate(i, j).to_bits(),
                    surface.log_rate(i, 0).to_bits()
                );
            }
        }
        for state in &states[1..] {
            assert_eq!(state, &states[0]);
        }
    }

    #[test]
    fn seeded_simulation_is_bitwise_reproducible() {
        let hp = HyperParams::new(0.01, 0.05, 0.002, 1.0).unwrap();
        let initial = pinned_initial(5, &[-4.0, -3.0, -2.5, -2.0, -1.5]);
        let config = base_config(SimMode::Gaussian, hp, initial);
        let (a, states_a) = simulate_surface(&config).unwrap();
        let (b, states_b) = simulate_surface(&config).unwrap();
        for j in 0..a.n() {
            for i in 0..a.k() {
                assert_eq!(a.log_rate(i, j).to_bits(), b.log_rate(i, j).to_bits());
            }
        }
        assert_eq!(states_a, states_b);
    }

    #[test]
    fn state_increments_match_process_noise_covariance() {
        // Long single-trajectory run: increments x_{s+1} - T x_s are iid
        // N(0, Q), so their sample covariance converges to Q.
        let basis = build_basis(&[0.0, 10.0], 1).unwrap(); // two bases
        let p = basis.p();
        let hp = HyperParams::new(0.01, 0.3, 0.05, 0.8).unwrap();
        let correlations = identity_correlations(p);
        let layout = StateLayout::new(p);
        let initial = GaussianBelief::new(
            DVector::zeros(layout.dim()),
            DMatrix::zeros(layout.dim(), layout.dim()),
        )
        .unwrap();
        let config = SimConfig {
            hp,
            basis,
            correlations: correlations.clone(),
            n_years: 10_001,
            start_year: 0,
            ages: (0..=10).collect(),
            exposures: ExposureSpec::Constant(1.0),
            rng_seed: 99,
            mode: SimMode::Gaussian,
            initial,
            country_code: "SIM".into(),
            gender: Gender::Female,
        };
        let (_, states) = simulate_surface(&config).unwrap();
        let step = build_step(&hp, &correlations, &layout, 1.0).unwrap();

        let dim = layout.dim();
        let n_inc = states.len() - 1;
        let increments: Vec<DVector<f64>> = (0..n_inc)
            .map(|s| &states[s + 1] - &step.t * &states[s])
            .collect();
        let mean = increments.iter().fold(DVector::zeros(dim), |acc, x| acc + x) / n_inc as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for inc in &increments {
            let centered = inc - &mean;
            cov += &centered * centered.transpose();
        }
        cov /= (n_inc - 1) as f64;

        let rel = (&cov - &step.q).norm() / step.q.norm();
        assert!(rel < 0.10, "relative Frobenius error {rel}");
    }

    #[test]
    fn true_parameters_score_in_top_decile_of_random_cloud() {
        let hp = HyperParams::new(0.01, 0.02, 0.001, 1.0).unwrap();
        let initial = pinned_initial(5, &[-4.0, -3.2, -2.8, -2.2, -1.8]);
        let mut config = base_config(SimMode::Gaussian, hp, initial);
        config.n_years = 40;
        let (surface, _) = simulate_surface(&config).unwrap();

        let ages = surface.age_grid();
        let lags = surface.lags();
        let observations = surface.observations();
        let score = |candidate: &HyperParams| -> f64 {
            let mut model =
                assemble(&config.basis, &config.correlations, candidate, &ages, &lags).unwrap();
            let design = design_matrix(&config.basis, &ages).unwrap();
            model.initial.mean =
                crate::statespace::data_driven_initial_mean(&design, &observations[0]).unwrap();
            fast_loglik(&model, &observations).unwrap_or(f64::NEG_INFINITY)
        };

        let truth_score = score(&hp);
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let bounds = estimation::default_log_bounds();
        let mut better = 0;
        for _ in 0..100 {
            let draw = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
                (lo + (hi - lo) * rng.random::<f64>()).exp()
            };
            let candidate = HyperParams {
                sigma2_obs: draw(&mut rng, bounds[0].0, bounds[0].1),
                sigma2_beta: draw(&mut rng, bounds[1].0, bounds[1].1),
                sigma2_a: draw(&mut rng, bounds[2].0, bounds[2].1),
                lambda: draw(&mut rng, bounds[3].0, bounds[3].1),
            };
            if score(&candidate) > truth_score {
                better += 1;
            }
        }
        assert!(better <= 10, "{better} of 100 random points beat the truth");
    }

    #[test]
    fn poisson_counts_concentrate_at_large_exposure() {
        // Flat latent surface at rate 0.1 (partition of unity makes the
        // basis expansion of constant levels exactly constant), no latent
        // dispersion: log(d/E) should sit within 0.01 of the latent
        // log-rate for at least 99% of cells at exposure 1e6.
        let hp = HyperParams {
            sigma2_obs: 0.0,
            sigma2_beta: 0.0,
            sigma2_a: 0.0,
            lambda: 1.0,
        };
        let level = 0.1f64.ln();
        let initial = pinned_initial(5, &[level; 5]);
        let mut config = base_config(SimMode::Poisson, hp, initial);
        config.n_years = 1000; // 11 ages x 1000 years > 1e4 cells
        let (surface, _) = simulate_surface(&config).unwrap();

        let mut within = 0usize;
        let mut total = 0usize;
        for j in 0..surface.n() {
            for i in 0..surface.k() {
                total += 1;
                if surface.is_observed(i, j) && (surface.log_rate(i, j) - level).abs() < 0.01 {
                    within += 1;
                }
            }
        }
        let fraction = within as f64 / total as f64;
        assert!(fraction >= 0.99, "only {fraction:.4} of cells within 0.01");
        assert!(surface.deaths().is_some() && surface.exposures().is_some());
    }

    #[test]
    fn limit_distances_shrink_with_exposure() {
        let config = LimitCheckConfig {
            exposure_levels: vec![1.0e2, 1.0e4, 1.0e6],
            n_draws: 100_000,
            log_rate: 0.01f64.ln(),
            sigma2: 0.05 * 0.05,
            rng_seed: 31,
        };
        let distances = poisson_limit_check(&config).unwrap();
        assert_eq!(distances.len(), 3);
        assert!(
            distances[2].ks_distance < 0.01,
            "distance at 1e6 is {}",
            distances[2].ks_distance
        );
        // Monotone nonincreasing, allowing Monte Carlo slack.
        for w in distances.windows(2) {
            assert!(
                w[1].ks_distance <= w[0].ks_distance + 0.002,
                "distances {} -> {} increased",
                w[0].ks_distance,
                w[1].ks_distance
            );
        }
    }

    #[test]
    fn limit_degenerates_when_both_noise_sources_vanish() {
        // sigma = 0 and huge exposure: every draw collapses onto f.
        let f = 0.01f64.ln();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = draw_log_ratios(&mut rng, 1.0e10, 1000, f, 0.0).unwrap();
        let max_dev = samples
            .iter()
            .map(|x| (x - f).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-3, "max deviation {max_dev}");
    }

    #[test]
    fn limit_check_rejects_bad_inputs() {
        let good = LimitCheckConfig {
            exposure_levels: vec![10.0, 100.0],
            n_draws: 10,
            log_rate: -2.0,
            sigma2: 0.01,
            rng_seed: 1,
        };
        let mut decreasing = good.clone();
        decreasing.exposure_levels = vec![100.0, 10.0];
        assert!(poisson_limit_check(&decreasing).is_err());
        let mut zero_sigma = good.clone();
        zero_sigma.sigma2 = 0.0;
        assert!(poisson_limit_check(&zero_sigma).is_err());
        let mut no_draws = good;
        no_draws.n_draws = 0;
        assert!(poisson_limit_check(&no_draws).is_err());
    }

    #[test]
    fn config_validation_catches_shape_errors() {
        let hp = HyperParams::new(0.01, 0.05, 0.002, 1.0).unwrap();
        let initial = pinned_initial(5, &[-3.0; 5]);
        let good = base_config(SimMode::Poisson, hp, initial);

        let mut wrong_exposures = good.clone();
        wrong_exposures.exposures = ExposureSpec::Grid(DMatrix::from_element(2, 2, 1.0));
        assert!(simulate_surface(&wrong_exposures).is_err());

        let mut negative_var = good.clone();
        negative_var.hp.sigma2_beta = -1.0;
        assert!(simulate_surface(&negative_var).is_err());

        let mut bad_lambda = good;
        bad_lambda.hp.lambda = 0.0;
        assert!(simulate_surface(&bad_lambda).is_err());
    }
}
