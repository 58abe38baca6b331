//! Dense joint-Gaussian reference shared by the integration tests.
//!
//! A linear-Gaussian state-space model makes the stacked state trajectory
//! and the stacked observed coordinates one big multivariate normal.
//! Conditioning that joint directly — at O((nd)³) cost — yields the
//! prediction, filtering and smoothing marginals and the marginal
//! likelihood without any forward or backward recursion, so it serves as an
//! independent oracle for the recursive implementations on small instances.

use bsp_core::kalman::ObservationVector;
use bsp_core::statespace::StateSpaceModel;
use nalgebra::{Cholesky, DMatrix, DVector};

const LN_2PI: f64 = 1.837_877_066_409_345_4;

/// Marginals obtained by brute-force conditioning of the joint normal.
pub struct DenseAnalysis {
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub smoothed_means: Vec<DVector<f64>>,
    pub smoothed_covs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

/// One stacked observed coordinate: which time, which row of `z`, its value.
struct StackedObs {
    time: usize,
    row: usize,
    value: f64,
}

/// Brute-force analysis of the model given partially observed vectors.
///
/// `observations` must have one entry per model time point. Marginals are
/// computed by conditioning the state at time `t` on the observed
/// coordinates with time `< t` (prediction), `<= t` (filtering) and all of
/// them (smoothing); the likelihood is the normal density of the stacked
/// observed values.
pub fn dense_analysis(
    model: &StateSpaceModel,
    observations: &[ObservationVector],
) -> DenseAnalysis {
    let n = model.n_times();
    let d = model.state_dim();
    assert_eq!(observations.len(), n, "one observation vector per time");

    // Joint law of the stacked states, one d x d block per pair of times.
    let mut state_means: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut state_covs: Vec<Vec<DMatrix<f64>>> = vec![vec![DMatrix::zeros(d, d); n]; n];
    state_means.push(model.initial.mean.clone());
    state_covs[0][0] = model.initial.cov.clone();
    for t in 1..n {
        let step = &model.steps[t - 1];
        let mean = &step.t * &state_means[t - 1];
        state_means.push(mean);
        // Index loop: each pass writes both triangle entries (s, t) and (t, s).
        #[allow(clippy::needless_range_loop)]
        for s in 0..t {
            state_covs[s][t] = &state_covs[s][t - 1] * step.t.transpose();
            state_covs[t][s] = state_covs[s][t].transpose();
        }
        state_covs[t][t] = &step.t * &state_covs[t - 1][t - 1] * step.t.transpose() + &step.q;
    }

    // Stack the observed coordinates in time order.
    let mut stacked: Vec<StackedObs> = Vec::new();
    let mut prefix_len = vec![0usize; n + 1];
    for (t, obs) in observations.iter().enumerate() {
        for row in obs.observed_indices() {
            stacked.push(StackedObs {
                time: t,
                row,
                value: obs.value(row),
            });
        }
        prefix_len[t + 1] = stacked.len();
    }
    let m = stacked.len();

    let mut obs_mean = DVector::zeros(m);
    let mut obs_cov = DMatrix::zeros(m, m);
    for (a, oa) in stacked.iter().enumerate() {
        obs_mean[a] = model.z.row(oa.row).transpose().dot(&state_means[oa.time]);
        for (b, ob) in stacked.iter().enumerate() {
            let block = &state_covs[oa.time][ob.time];
            obs_cov[(a, b)] =
                (model.z.row(oa.row) * block * model.z.row(ob.row).transpose())[(0, 0)];
            if oa.time == ob.time && oa.row == ob.row {
                obs_cov[(a, b)] += model.h_diag[oa.row];
            }
        }
    }
    let residual = DVector::from_fn(m, |a, _| stacked[a].value - obs_mean[a]);

    // Cross-covariance between the state at time t and every stacked
    // coordinate.
    let cross: Vec<DMatrix<f64>> = (0..n)
        .map(|t| {
            let mut c = DMatrix::zeros(d, m);
            for (a, oa) in stacked.iter().enumerate() {
                c.column_mut(a)
                    .copy_from(&(&state_covs[t][oa.time] * model.z.row(oa.row).transpose()));
            }
            c
        })
        .collect();

    // Conditioning x_t on the first `len` stacked coordinates.
    let condition = |t: usize, len: usize| -> (DVector<f64>, DMatrix<f64>) {
        if len == 0 {
            return (state_means[t].clone(), state_covs[t][t].clone());
        }
        let sigma = obs_cov.view((0, 0), (len, len)).into_owned();
        let chol = Cholesky::new(sigma).expect("observed-block covariance is positive definite");
        let cross_t = cross[t].columns(0, len).into_owned();
        let solved = chol.solve(&cross_t.transpose()); // len x d
        let mean = &state_means[t] + solved.transpose() * residual.rows(0, len);
        let cov = &state_covs[t][t] - cross_t * solved;
        (mean, cov)
    };

    let mut analysis = DenseAnalysis {
        predicted_means: Vec::with_capacity(n),
        predicted_covs: Vec::with_capacity(n),
        filtered_means: Vec::with_capacity(n),
        filtered_covs: Vec::with_capacity(n),
        smoothed_means: Vec::with_capacity(n),
        smoothed_covs: Vec::with_capacity(n),
        log_likelihood: 0.0,
    };
    for t in 0..n {
        let (mean, cov) = condition(t, prefix_len[t]);
        analysis.predicted_means.push(mean);
        analysis.predicted_covs.push(cov);
        let (mean, cov) = condition(t, prefix_len[t + 1]);
        analysis.filtered_means.push(mean);
        analysis.filtered_covs.push(cov);
        let (mean, cov) = condition(t, m);
        analysis.smoothed_means.push(mean);
        analysis.smoothed_covs.push(cov);
    }

    analysis.log_likelihood = if m == 0 {
        0.0
    } else {
        let chol = Cholesky::new(obs_cov.clone()).expect("stacked covariance positive definite");
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let quad = residual.dot(&chol.solve(&residual));
        -0.5 * (m as f64 * LN_2PI + log_det + quad)
    };
    analysis
}

use bsp_core::basis::build_basis;
use bsp_core::covariance::{build_correlations, CorrelationSpec, KernelConfig};
use bsp_core::statespace::{assemble, HyperParams};
use rand::Rng;
use rand_distr::StandardNormal;

/// Draws from N(mean, cov) with an eigenvalue-clamped square root, so
/// positive-semidefinite covariances (noise blocks can be nearly rank
/// deficient) sample cleanly.
pub fn sample_gaussian<R: Rng>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let eigen = cov.clone().symmetric_eigen();
    let mut scaled = eigen.eigenvectors.clone();
    for (c, &value) in eigen.eigenvalues.iter().enumerate() {
        let scale = value.max(0.0).sqrt();
        scaled.column_mut(c).scale_mut(scale);
    }
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample(StandardNormal));
    mean + scaled * z
}

/// A random small model instance plus observations simulated from it.
///
/// Dimensions satisfy `state_dim * n_times <= 60` so the dense oracle stays
/// cheap. Roughly 15% of cells and 8% of whole years are masked missing.
pub fn random_instance<R: Rng>(rng: &mut R) -> (StateSpaceModel, Vec<ObservationVector>) {
    let interior = rng.random_range(0..=2usize);
    let mut knots = vec![0.0, 10.0];
    for _ in 0..interior {
        knots.push(rng.random_range(2.0..8.0));
    }
    knots.sort_by(f64::total_cmp);
    let basis = build_basis(&knots, 1).expect("valid knots");
    let p = basis.p();

    let n = rng.random_range(2..=(20 / p).max(2));
    let k = rng.random_range(2..=6usize);
    let ages: Vec<f64> = (0..k)
        .map(|i| 10.0 * (i as f64 + 0.5 + 0.3 * rng.random_range(-1.0..1.0)) / k as f64)
        .collect();

    let hp = HyperParams::new(
        rng.random_range(0.01..1.0),
        rng.random_range(0.01..0.5),
        rng.random_range(0.001..0.1),
        rng.random_range(0.3..2.0),
    )
    .expect("valid draw");
    let correlations = if rng.random_bool(0.5) {
        build_correlations(
            &basis,
            &KernelConfig::exponential(rng.random_range(0.5..3.0)).unwrap(),
            &CorrelationSpec::Identity,
        )
        .unwrap()
    } else {
        bsp_core::covariance::CorrelationPair::identity(p)
    };
    let lags: Vec<f64> = (1..n).map(|_| rng.random_range(0.5..2.0)).collect();
    let model = assemble(&basis, &correlations, &hp, &ages, &lags).expect("valid instance");

    // Simulate a trajectory and partially masked observations from the
    // model's own law.
    let mut state = sample_gaussian(&model.initial.mean, &model.initial.cov, rng);
    let mut observations = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            let step = &model.steps[t - 1];
            let noise = sample_gaussian(&DVector::zeros(state.len()), &step.q, rng);
            state = &step.t * &state + noise;
        }
        if rng.random_bool(0.08) {
            observations.push(ObservationVector::all_missing(k));
            continue;
        }
        let mut values = DVector::zeros(k);
        let mut observed = vec![true; k];
        for i in 0..k {
            let eps: f64 = rng.sample(StandardNormal);
            values[i] = model.z.row(i).transpose().dot(&state) + model.h_diag[i].sqrt() * eps;
            if rng.random_bool(0.15) {
                observed[i] = false;
                values[i] = 0.0;
            }
        }
        observations.push(ObservationVector::new(values, observed).unwrap());
    }
    (model, observations)
}
