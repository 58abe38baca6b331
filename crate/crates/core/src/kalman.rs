//! Exact inference in the Gaussian linear state space: filtering, one-step
//! prediction, fixed-interval smoothing, likelihood evaluation, posterior
//! sampling and projection back to the observation space.
//!
//! Missing observations are handled by row deletion: at every time step the
//! observation matrix and noise are restricted to the observed coordinates,
//! which is exactly equivalent to conditioning only on what was seen. A
//! fully missing step contributes nothing to the likelihood and leaves the
//! filtered belief equal to the predicted one.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, sample_mvn, sampling_factor, symmetrize};
use crate::statespace::{GaussianBelief, StateSpaceModel};

const LN_2PI: f64 = 1.837_877_066_409_345_4;

/// One time point's observations with an explicit missingness mask.
///
/// `values` entries at unobserved positions are ignored by all consumers
/// (they are stored as NaN by the constructors that take masks).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationVector {
    values: DVector<f64>,
    observed: Vec<bool>,
}

impl ObservationVector {
    /// Builds an observation vector from values and a mask. Every entry
    /// marked observed must be finite.
    pub fn new(values: DVector<f64>, observed: Vec<bool>) -> Result<Self> {
        if values.len() != observed.len() {
            return Err(Error::Input(format!(
                "{} values with a mask of length {}",
                values.len(),
                observed.len()
            )));
        }
        for (i, (&v, &o)) in values.iter().zip(observed.iter()).enumerate() {
            if o && !v.is_finite() {
                return Err(Error::Input(format!(
                    "non-finite value {v} at coordinate {i} is marked observed"
                )));
            }
        }
        Ok(ObservationVector { values, observed })
    }

    /// All coordinates observed; values must be finite.
    pub fn fully_observed(values: DVector<f64>) -> Result<Self> {
        let observed = vec![true; values.len()];
        Self::new(values, observed)
    }

    /// A time point with no observations at all.
    pub fn all_missing(len: usize) -> Self {
        ObservationVector {
            values: DVector::from_element(len, f64::NAN),
            observed: vec![false; len],
        }
    }

    /// Number of coordinates (observed or not).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    /// Whether coordinate `i` carries an observation.
    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i]
    }

    /// Value at coordinate `i` (NaN-ish garbage if unobserved).
    pub fn value(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Raw value vector.
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    /// Indices of the observed coordinates, in increasing order.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.observed[i]).collect()
    }

    /// Number of observed coordinates.
    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

/// Output of the forward pass.
///
/// For every time step `s`: `predicted[s]` is the belief given observations
/// strictly before `s`, `filtered[s]` the belief including step `s`.
/// Innovations and their covariances are restricted to the observed
/// coordinates of the step (empty for fully missing steps), and
/// `step_logliks[s]` is that step's contribution to the total.
#[derive(Debug, Clone)]
pub struct FilterResult {
    pub predicted: Vec<GaussianBelief>,
    pub filtered: Vec<GaussianBelief>,
    pub innovations: Vec<DVector<f64>>,
    pub innovation_covs: Vec<DMatrix<f64>>,
    pub observed_indices: Vec<Vec<usize>>,
    pub step_logliks: Vec<f64>,
    pub log_likelihood: f64,
}

/// Output of the backward pass: beliefs given *all* observations, plus the
/// forward-pass beliefs they were derived from (the forecast layer needs
/// both).
#[derive(Debug, Clone)]
pub struct SmootherResult {
    pub smoothed: Vec<GaussianBelief>,
    pub filtered: Vec<GaussianBelief>,
    pub predicted: Vec<GaussianBelief>,
}

fn validate_observations(model: &StateSpaceModel, observations: &[ObservationVector]) -> Result<()> {
    model.validate()?;
    if observations.len() != model.n_times() {
        return Err(Error::Input(format!(
            "{} observation vectors for a model with {} time points",
            observations.len(),
            model.n_times()
        )));
    }
    for (s, obs) in observations.iter().enumerate() {
        if obs.len() != model.n_obs() {
            return Err(Error::Input(format!(
                "observation vector at step {s} has length {}, expected {}",
                obs.len(),
                model.n_obs()
            )));
        }
    }
    Ok(())
}

/// Runs the Kalman filter over the whole series.
///
/// The update at each step uses the standard covariance form with a
/// Cholesky factorisation of the innovation covariance (one jitter retry of
/// `1e-10` on the diagonal); a failure surfaces as a numerical error
/// carrying the step index. Covariances are re-symmetrised after every
/// update and prediction to stop round-off drift.
pub fn filter(model: &StateSpaceModel, observations: &[ObservationVector]) -> Result<FilterResult> {
    validate_observations(model, observations)?;
    let n = model.n_times();
    let d = model.state_dim();

    let mut predicted = Vec::with_capacity(n);
    let mut filtered = Vec::with_capacity(n);
    let mut innovations = Vec::with_capacity(n);
    let mut innovation_covs = Vec::with_capacity(n);
    let mut observed_indices = Vec::with_capacity(n);
    let mut step_logliks = Vec::with_capacity(n);
    let mut log_likelihood = 0.0;

    let mut pred = model.initial.clone();
    for (s, obs) in observations.iter().enumerate() {
        predicted.push(pred.clone());
        let idx = obs.observed_indices();

        let (belief, v, f_mat, ll) = if idx.is_empty() {
            (pred.clone(), DVector::zeros(0), DMatrix::zeros(0, 0), 0.0)
        } else {
            let m = idx.len();
            let mut z_s = DMatrix::zeros(m, d);
            let mut y_s = DVector::zeros(m);
            for (row, &i) in idx.iter().enumerate() {
                z_s.row_mut(row).copy_from(&model.z.row(i));
                y_s[row] = obs.value(i);
            }

            let v = &y_s - &z_s * &pred.mean;
            let z_sigma = &z_s * &pred.cov; // m x d
            let mut f_mat = &z_sigma * z_s.transpose();
            for (row, &i) in idx.iter().enumerate() {
                f_mat[(row, row)] += model.h_diag[i];
            }
            symmetrize(&mut f_mat);

            let chol = cholesky_with_jitter(&f_mat).ok_or_else(|| {
                Error::numerical(s, "innovation covariance is not positive definite")
            })?;
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let finv_v = chol.solve(&v);
            let ll = -0.5 * (m as f64 * LN_2PI + log_det + v.dot(&finv_v));
            if !ll.is_finite() {
                return Err(Error::numerical(s, "non-finite likelihood contribution"));
            }

            // Gain K = Sigma Z^T F^-1, via F^-1 (Z Sigma) transposed.
            let k_gain = chol.solve(&z_sigma).transpose(); // d x m
            let mean = &pred.mean + &k_gain * &v;
            let mut cov = &pred.cov - &k_gain * &z_sigma;
            symmetrize(&mut cov);
            (GaussianBelief { mean, cov }, v, f_mat, ll)
        };

        log_likelihood += ll;
        step_logliks.push(ll);
        innovations.push(v);
        innovation_covs.push(f_mat);
        observed_indices.push(idx);
        filtered.push(belief.clone());

        if s + 1 < n {
            let step = &model.steps[s];
            let mean = &step.t * &belief.mean;
            let mut cov = &step.t * &belief.cov * step.t.transpose() + &step.q;
            symmetrize(&mut cov);
            pred = GaussianBelief { mean, cov };
        }
    }

    Ok(FilterResult {
        predicted,
        filtered,
        innovations,
        innovation_covs,
        observed_indices,
        step_logliks,
        log_likelihood,
    })
}

/// Total marginal log-likelihood of the observations, as accumulated by the
/// filter.
pub fn loglik(model: &StateSpaceModel, observations: &[ObservationVector]) -> Result<f64> {
    Ok(filter(model, observations)?.log_likelihood)
}

/// Marginal log-likelihood via sequential scalar updates.
///
/// Algebraically identical to [`loglik`] because the observation noise is
/// diagonal: coordinates within a time step are absorbed one at a time,
/// replacing the dense innovation solve by rank-1 covariance updates. This
/// path exploits the sparsity of the observation and transition matrices
/// and is the one the estimation loop drives; it agrees with the batch
/// filter to floating-point round-off.
pub fn fast_loglik(model: &StateSpaceModel, observations: &[ObservationVector]) -> Result<f64> {
    validate_observations(model, observations)?;
    let n = model.n_times();
    let d = model.state_dim();
    let k = model.n_obs();

    // Row sparsity of Z, shared by every step.
    let z_rows: Vec<Vec<(usize, f64)>> = (0..k)
        .map(|i| {
            (0..d)
                .filter_map(|c| {
                    let v = model.z[(i, c)];
                    (v != 0.0).then_some((c, v))
                })
                .collect()
        })
        .collect();

    let mut mean = model.initial.mean.clone();
    let mut cov = model.initial.cov.clone();
    let mut w = vec![0.0; d];
    let mut tmp = DMatrix::<f64>::zeros(d, d);
    let mut next_mean = DVector::<f64>::zeros(d);
    let mut ll = 0.0;

    for (s, obs) in observations.iter().enumerate() {
        for (i, row) in z_rows.iter().enumerate() {
            if !obs.is_observed(i) {
                continue;
            }
            let sigma = cov.as_slice();
            // w = Sigma z_i, f = z_i^T w + h_i, v = y_i - z_i^T mean.
            w.iter_mut().for_each(|x| *x = 0.0);
            for &(c, zc) in row {
                let col = &sigma[c * d..(c + 1) * d];
                for r in 0..d {
                    w[r] += col[r] * zc;
                }
            }
            let mut f = model.h_diag[i];
            let mut v = obs.value(i);
            for &(c, zc) in row {
                f += zc * w[c];
                v -= zc * mean[c];
            }
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::numerical(s, "nonpositive innovation variance"));
            }
            ll -= 0.5 * (LN_2PI + f.ln() + v * v / f);

            let alpha = v / f;
            for r in 0..d {
                mean[r] += w[r] * alpha;
            }
            let sigma = cov.as_mut_slice();
            for c in 0..d {
                let coeff = w[c] / f;
                if coeff != 0.0 {
                    let col = &mut sigma[c * d..(c + 1) * d];
                    for r in 0..d {
                        col[r] -= w[r] * coeff;
                    }
                }
            }
        }
        if !ll.is_finite() {
            return Err(Error::numerical(s, "non-finite likelihood accumulation"));
        }

        if s + 1 < n {
            let step = &model.steps[s];
            let t_rows: Vec<Vec<(usize, f64)>> = (0..d)
                .map(|r| {
                    (0..d)
                        .filter_map(|c| {
                            let v = step.t[(r, c)];
                            (v != 0.0).then_some((c, v))
                        })
                        .collect()
                })
                .collect();

            // tmp = Sigma T^T: column r of tmp is Sigma * (row r of T).
            {
                let sigma = cov.as_slice();
                let out = tmp.as_mut_slice();
                for r in 0..d {
                    let col = &mut out[r * d..(r + 1) * d];
                    col.iter_mut().for_each(|x| *x = 0.0);
                    for &(c, tv) in &t_rows[r] {
                        let scol = &sigma[c * d..(c + 1) * d];
                        for r2 in 0..d {
                            col[r2] += scol[r2] * tv;
                        }
                    }
                }
            }
            // cov = T tmp + Q, built column by column.
            {
                let q = step.q.as_slice();
                let a = tmp.as_slice();
                let out = cov.as_mut_slice();
                for cidx in 0..d {
                    let acol = &a[cidx * d..(cidx + 1) * d];
                    let ocol = &mut out[cidx * d..(cidx + 1) * d];
                    let qcol = &q[cidx * d..(cidx + 1) * d];
                    for r in 0..d {
                        let mut acc = qcol[r];
                        for &(c, tv) in &t_rows[r] {
                            acc += tv * acol[c];
                        }
                        ocol[r] = acc;
                    }
                }
            }
            symmetrize(&mut cov);
            for r in 0..d {
                let mut acc = 0.0;
                for &(c, tv) in &t_rows[r] {
                    acc += tv * mean[c];
                }
                next_mean[r] = acc;
            }
            std::mem::swap(&mut mean, &mut next_mean);
        }
    }
    Ok(ll)
}

/// Fixed-interval smoother (backward information recursion).
///
/// Runs the standard two-vector recursion: with `r` and `V` initialised to
/// zero past the last step,
///
/// ```text
/// r_{s-1} = Z_s^T F_s^-1 v_s + L_s^T r_s
/// V_{s-1} = Z_s^T F_s^-1 Z_s + L_s^T V_s L_s
/// L_s     = T_s (I - Sigma_pred_s Z_s^T F_s^-1 Z_s)
/// ```
///
/// and the smoothed belief at `s` is `mean_pred + Sigma_pred r_{s-1}` with
/// covariance `Sigma_pred - Sigma_pred V_{s-1} Sigma_pred`. Missing rows are
/// handled by the same restriction as the filter; the last step's `L` term
/// vanishes because `r` and `V` start at zero.
pub fn smooth(model: &StateSpaceModel, filter_result: &FilterResult) -> Result<SmootherResult> {
    let n = model.n_times();
    let d = model.state_dim();
    if filter_result.predicted.len() != n {
        return Err(Error::Input(format!(
            "filter result covers {} steps, model has {n}",
            filter_result.predicted.len()
        )));
    }

    let mut smoothed = vec![GaussianBelief::diffuse(0); n];
    let mut r = DVector::zeros(d);
    let mut v_mat = DMatrix::zeros(d, d);

    for s in (0..n).rev() {
        let idx = &filter_result.observed_indices[s];
        let pred = &filter_result.predicted[s];

        // u = Z^T F^-1 v, U = Z^T F^-1 Z on the observed rows.
        let (u, u_mat) = if idx.is_empty() {
            (DVector::zeros(d), DMatrix::zeros(d, d))
        } else {
            let m = idx.len();
            let mut z_s = DMatrix::zeros(m, d);
            for (row, &i) in idx.iter().enumerate() {
                z_s.row_mut(row).copy_from(&model.z.row(i));
            }
            let chol = cholesky_with_jitter(&filter_result.innovation_covs[s])
                .ok_or_else(|| Error::numerical(s, "innovation covariance lost definiteness"))?;
            let finv_v = chol.solve(&filter_result.innovations[s]);
            let finv_z = chol.solve(&z_s);
            (z_s.transpose() * finv_v, z_s.transpose() * finv_z)
        };

        let (r_prev, v_prev) = if s + 1 == n {
            (u, u_mat)
        } else {
            let t = &model.steps[s].t;
            // L = T (I - Sigma_pred U) restricted to this step.
            let l = t * (DMatrix::identity(d, d) - &pred.cov * &u_mat);
            let r_prev = &u + l.transpose() * &r;
            let mut v_prev = &u_mat + l.transpose() * &v_mat * &l;
            symmetrize(&mut v_prev);
            (r_prev, v_prev)
        };

        let mean = &pred.mean + &pred.cov * &r_prev;
        let mut cov = &pred.cov - &pred.cov * &v_prev * &pred.cov;
        symmetrize(&mut cov);
        smoothed[s] = GaussianBelief { mean, cov };

        r = r_prev;
        v_mat = v_prev;
    }

    Ok(SmootherResult {
        smoothed,
        filtered: filter_result.filtered.clone(),
        predicted: filter_result.predicted.clone(),
    })
}

/// Draws joint samples of the whole state trajectory from the smoothing
/// distribution (forward filter, backward sampling).
///
/// Takes the forward-pass beliefs (as held by both [`FilterResult`] and
/// [`SmootherResult`]) and returns `n_draws` trajectories, each a vector of
/// state vectors indexed by time step. Used to quantify uncertainty of
/// statistics computed from smoothed trajectories.
pub fn sample_states<R: Rng>(
    model: &StateSpaceModel,
    filtered: &[GaussianBelief],
    predicted: &[GaussianBelief],
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let n = model.n_times();
    let d = model.state_dim();
    if filtered.len() != n || predicted.len() != n {
        return Err(Error::Input(format!(
            "forward pass covers {} filtered / {} predicted steps, model has {n}",
            filtered.len(),
            predicted.len()
        )));
    }
    if n == 0 || n_draws == 0 {
        return Ok(vec![Vec::new(); n_draws]);
    }

    // Precompute per-step backward gains J_s and conditional factors so the
    // per-draw cost is two matrix-vector products per step.
    // x_s | x_{s+1} ~ N(mu_f + J (x_{s+1} - mu_pred_{s+1}), Sigma_f - J Sigma_pred_{s+1} J^T)
    // with J = Sigma_f T_s^T Sigma_pred_{s+1}^-1.
    let mut gains = Vec::with_capacity(n.saturating_sub(1));
    let mut factors = Vec::with_capacity(n.saturating_sub(1));
    for s in 0..n - 1 {
        let filt = &filtered[s];
        let pred_next = &predicted[s + 1];
        let t = &model.steps[s].t;
        let chol = cholesky_with_jitter(&pred_next.cov)
            .ok_or_else(|| Error::numerical(s + 1, "predictive covariance lost definiteness"))?;
        // J^T = Sigma_pred^-1 (T Sigma_f)
        let j_t = chol.solve(&(t * &filt.cov));
        let j = j_t.transpose();
        let mut cond_cov = &filt.cov - &j * &pred_next.cov * j.transpose();
        symmetrize(&mut cond_cov);
        factors.push(sampling_factor(&cond_cov));
        gains.push(j);
    }
    let last = &filtered[n - 1];
    let last_factor = sampling_factor(&last.cov);

    let mut draws = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let mut states = vec![DVector::zeros(d); n];
        states[n - 1] = sample_mvn(rng, &last.mean, &last_factor);
        for s in (0..n - 1).rev() {
            let filt = &filtered[s];
            let pred_next = &predicted[s + 1];
            let shift = &states[s + 1] - &pred_next.mean;
            let cond_mean = &filt.mean + &gains[s] * shift;
            states[s] = sample_mvn(rng, &cond_mean, &factors[s]);
        }
        draws.push(states);
    }
    Ok(draws)
}

/// Projects a state belief to the observation space: the latent surface has
/// mean `Z mu` and pointwise variance `diag(Z Sigma Z^T)` (observation noise
/// excluded).
pub fn project_to_surface(
    model: &StateSpaceModel,
    belief: &GaussianBelief,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if belief.dim() != model.state_dim() {
        return Err(Error::Input(format!(
            "belief has dimension {}, model expects {}",
            belief.dim(),
            model.state_dim()
        )));
    }
    let mean = &model.z * &belief.mean;
    let zs = &model.z * &belief.cov;
    let var = DVector::from_fn(model.n_obs(), |i, _| zs.row(i).dot(&model.z.row(i)));
    Ok((mean, var))
}
