//! Exact discretisation of the coefficient dynamics into a Gaussian linear
//! state space.
//!
//! Each basis coefficient carries three state coordinates: the level, its
//! time derivative, and a local acceleration component that lets the trend
//! bend. In continuous time the level integrates the derivative, the
//! derivative integrates the acceleration (plus Brownian noise), and the
//! acceleration itself is Brownian. Integrating those dynamics exactly over
//! a time lag `delta` gives the closed-form transition and process-noise
//! blocks implemented here; no Euler approximation is involved, so the
//! model is consistent under refinement of the time grid.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisSet, DesignMatrix};
use crate::covariance::CorrelationPair;
use crate::error::{Error, Result};
use crate::kalman::ObservationVector;

/// Scale of the diffuse initial covariance (`10 * I`).
pub const INITIAL_COV_SCALE: f64 = 10.0;

/// Model hyperparameters: observation-noise variance, the two process-noise
/// variances, and the time-scale factor `lambda`. All must be strictly
/// positive for an assembled model; see [`HyperParams::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Observation (measurement) noise variance on log-rates.
    pub sigma2_obs: f64,
    /// Instantaneous variance of the derivative noise.
    pub sigma2_beta: f64,
    /// Instantaneous variance of the acceleration noise.
    pub sigma2_a: f64,
    /// Time-scale factor multiplying the derivative and acceleration flows.
    pub lambda: f64,
}

impl HyperParams {
    /// Validates strict positivity of every parameter.
    pub fn new(sigma2_obs: f64, sigma2_beta: f64, sigma2_a: f64, lambda: f64) -> Result<Self> {
        let hp = HyperParams {
            sigma2_obs,
            sigma2_beta,
            sigma2_a,
            lambda,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Checks that all four parameters are finite and strictly positive.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2_obs", self.sigma2_obs),
            ("sigma2_beta", self.sigma2_beta),
            ("sigma2_a", self.sigma2_a),
            ("lambda", self.lambda),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Domain(format!(
                    "hyperparameter {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Index arithmetic for the stacked state vector.
///
/// The state interleaves coordinates per basis: for basis `j` (0-based) the
/// level sits at `3j`, the derivative at `3j + 1` and the acceleration at
/// `3j + 2`. Total dimension is `3p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    p: usize,
}

impl StateLayout {
    pub fn new(p: usize) -> Self {
        StateLayout { p }
    }

    /// Number of bases.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Total state dimension `3p`.
    pub fn dim(&self) -> usize {
        3 * self.p
    }

    /// Position of the level coordinate of basis `j`.
    pub fn level(&self, j: usize) -> usize {
        3 * j
    }

    /// Position of the derivative coordinate of basis `j`.
    pub fn derivative(&self, j: usize) -> usize {
        3 * j + 1
    }

    /// Position of the acceleration coordinate of basis `j`.
    pub fn acceleration(&self, j: usize) -> usize {
        3 * j + 2
    }
}

/// A Gaussian distribution over the state vector.
///
/// Fields are public so that beliefs can be constructed directly in tests
/// and when seeding simulations; [`GaussianBelief::validate`] checks the
/// structural invariants when needed.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Validating constructor: square covariance matching the mean length,
    /// symmetric to `1e-10`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let belief = GaussianBelief { mean, cov };
        belief.validate()?;
        Ok(belief)
    }

    /// Zero mean with the standard diffuse covariance `10 * I`.
    pub fn diffuse(dim: usize) -> Self {
        GaussianBelief {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim) * INITIAL_COV_SCALE,
        }
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks shape compatibility and symmetry of the covariance.
    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.cov.nrows() != n || self.cov.ncols() != n {
            return Err(Error::Input(format!(
                "covariance is {}x{} but mean has length {n}",
                self.cov.nrows(),
                self.cov.ncols()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.cov[(i, j)] - self.cov[(j, i)]).abs() > 1e-10 {
                    return Err(Error::Input(format!(
                        "covariance is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One time step of the dynamics: transition matrix and process noise.
#[derive(Debug, Clone)]
pub struct TransitionStep {
    pub t: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

/// A fully specified Gaussian linear state-space model on a fixed time grid.
///
/// Observation equation: `y_s = Z b_s + e_s`, `e_s ~ N(0, diag(h_diag))`.
/// State equation: `b_{s+1} = T_s b_s + u_s`, `u_s ~ N(0, Q_s)`, with
/// `steps[s]` carrying `(T_s, Q_s)` for the move from time `s` to `s + 1`.
/// `initial` is the belief over the state at the first time point before
/// any observation is absorbed. The container is generic over dimension:
/// the forecast layer reuses it for a different (random-walk) dynamic.
#[derive(Debug, Clone)]
pub struct StateSpaceModel {
    pub z: DMatrix<f64>,
    pub h_diag: DVector<f64>,
    pub steps: Vec<TransitionStep>,
    pub initial: GaussianBelief,
    pub lags: Vec<f64>,
}

impl StateSpaceModel {
    /// State dimension.
    pub fn state_dim(&self) -> usize {
        self.z.ncols()
    }

    /// Observation dimension (number of ages).
    pub fn n_obs(&self) -> usize {
        self.z.nrows()
    }

    /// Number of time points on the grid (`steps.len() + 1`).
    pub fn n_times(&self) -> usize {
        self.steps.len() + 1
    }

    /// Structural consistency of all pieces.
    pub fn validate(&self) -> Result<()> {
        let d = self.state_dim();
        if self.h_diag.len() != self.n_obs() {
            return Err(Error::Input(format!(
                "h_diag has length {} but Z has {} rows",
                self.h_diag.len(),
                self.n_obs()
            )));
        }
        if self.h_diag.iter().any(|&h| !(h.is_finite() && h > 0.0)) {
            return Err(Error::Input(
                "observation noise variances must be strictly positive".into(),
            ));
        }
        if self.initial.dim() != d {
            return Err(Error::Input(format!(
                "initial belief has dimension {} but Z has {d} columns",
                self.initial.dim()
            )));
        }
        self.initial.validate()?;
        if self.lags.len() != self.steps.len() {
            return Err(Error::Input(format!(
                "{} lags for {} transition steps",
                self.lags.len(),
                self.steps.len()
            )));
        }
        for (s, step) in self.steps.iter().enumerate() {
            if step.t.nrows() != d || step.t.ncols() != d || step.q.nrows() != d || step.q.ncols() != d
            {
                return Err(Error::Input(format!(
                    "transition step {s} has inconsistent dimensions"
                )));
            }
        }
        Ok(())
    }
}

/// Exact transition block over a lag `delta` with time scale `lambda`.
///
/// ```text
/// [ 1   lambda*delta   (lambda*delta)^2 / 2 ]
/// [ 0        1             lambda*delta     ]
/// [ 0        0                  1           ]
/// ```
///
/// Depends on `lambda` and `delta` only through their product, so halving
/// the lag while doubling the time scale leaves it unchanged.
pub fn transition_block(lambda: f64, delta: f64) -> Result<Matrix3<f64>> {
    check_positive("lambda", lambda)?;
    check_positive("delta", delta)?;
    let ld = lambda * delta;
    Ok(Matrix3::new(
        1.0,
        ld,
        0.5 * ld * ld,
        0.0,
        1.0,
        ld,
        0.0,
        0.0,
        1.0,
    ))
}

/// Exact process-noise block over a lag `delta` for one pair of bases.
///
/// The block is the sum of a derivative-noise part scaled by
/// `sigma2_beta * rho_beta` and an acceleration-noise part scaled by
/// `sigma2_a * rho_a`, each obtained by integrating the continuous-time
/// noise through the dynamics:
///
/// ```text
/// sigma2_beta * rho_beta * [ d^3 l^2 / 3   d^2 l / 2   0 ]      (d = delta,
///                          [ d^2 l / 2         d       0 ]       l = lambda)
///                          [     0             0       0 ]
///
/// sigma2_a * rho_a * [ d^5 l^4 / 20   d^4 l^3 / 8   d^3 l^2 / 6 ]
///                    [ d^4 l^3 / 8    d^3 l^2 / 3   d^2 l / 2   ]
///                    [ d^3 l^2 / 6    d^2 l / 2         d       ]
/// ```
///
/// Variances may be zero (degenerate noise used by simulations); `lambda`
/// and `delta` must be strictly positive. The result is symmetric positive
/// semidefinite whenever `|rho| <= 1`.
pub fn process_noise_block(
    sigma2_beta: f64,
    sigma2_a: f64,
    lambda: f64,
    rho_beta: f64,
    rho_a: f64,
    delta: f64,
) -> Result<Matrix3<f64>> {
    check_positive("lambda", lambda)?;
    check_positive("delta", delta)?;
    check_nonnegative("sigma2_beta", sigma2_beta)?;
    check_nonnegative("sigma2_a", sigma2_a)?;
    let l = lambda;
    let d = delta;
    let sb = sigma2_beta * rho_beta;
    let sa = sigma2_a * rho_a;

    let b00 = d.powi(3) * l * l / 3.0;
    let b01 = d * d * l / 2.0;
    let a00 = d.powi(5) * l.powi(4) / 20.0;
    let a01 = d.powi(4) * l.powi(3) / 8.0;
    let a02 = d.powi(3) * l * l / 6.0;
    let a11 = d.powi(3) * l * l / 3.0;
    let a12 = d * d * l / 2.0;

    Ok(Matrix3::new(
        sb * b00 + sa * a00,
        sb * b01 + sa * a01,
        sa * a02,
        sb * b01 + sa * a01,
        sb * d + sa * a11,
        sa * a12,
        sa * a02,
        sa * a12,
        sa * d,
    ))
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Domain(format!(
            "{name} must be strictly positive, got {v}"
        )));
    }
    Ok(())
}

fn check_nonnegative(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::Domain(format!(
            "{name} must be nonnegative, got {v}"
        )));
    }
    Ok(())
}

/// Assembles the full model for a basis set on an age grid and a sequence of
/// time lags.
///
/// The observation matrix embeds the design matrix into the interleaved
/// state layout (level coordinates only); observation noise is
/// `sigma2_obs * I`. Transition and noise matrices are block-structured per
/// basis pair and are rebuilt only for distinct lags. The initial belief is
/// diffuse (`0` mean, `10 * I` covariance); use
/// [`data_driven_initial_mean`] to replace the mean before filtering.
pub fn assemble(
    basis: &BasisSet,
    correlations: &CorrelationPair,
    hp: &HyperParams,
    ages: &[f64],
    lags: &[f64],
) -> Result<StateSpaceModel> {
    hp.validate()?;
    let p = basis.p();
    if correlations.p() != p {
        return Err(Error::Input(format!(
            "correlation matrices are for {} bases, basis set has {p}",
            correlations.p()
        )));
    }
    for &lag in lags {
        check_positive("time lag", lag)?;
    }

    let design = design_matrix(basis, ages)?;
    let layout = StateLayout::new(p);
    let k = design.n_ages();
    let dim = layout.dim();

    let mut z = DMatrix::zeros(k, dim);
    for i in 0..k {
        for j in 0..p {
            z[(i, layout.level(j))] = design.matrix()[(i, j)];
        }
    }

    let mut steps = Vec::with_capacity(lags.len());
    let mut cache: Option<(f64, TransitionStep)> = None;
    for &delta in lags {
        let reuse = matches!(&cache, Some((d, _)) if *d == delta);
        if !reuse {
            cache = Some((delta, build_step(hp, correlations, &layout, delta)?));
        }
        steps.push(cache.as_ref().unwrap().1.clone());
    }

    Ok(StateSpaceModel {
        z,
        h_diag: DVector::from_element(k, hp.sigma2_obs),
        steps,
        initial: GaussianBelief::diffuse(dim),
        lags: lags.to_vec(),
    })
}

/// Builds the full transition/noise pair for one lag. Variances may be zero
/// here (the blocks tolerate it), which simulation uses for degenerate
/// noiseless systems; `assemble` enforces strict positivity separately.
pub(crate) fn build_step(
    hp: &HyperParams,
    correlations: &CorrelationPair,
    layout: &StateLayout,
    delta: f64,
) -> Result<TransitionStep> {
    let p = layout.p();
    let dim = layout.dim();
    let block_t = transition_block(hp.lambda, delta)?;
    let mut t = DMatrix::zeros(dim, dim);
    let mut q = DMatrix::zeros(dim, dim);
    for j in 0..p {
        t.view_mut((3 * j, 3 * j), (3, 3)).copy_from(&block_t);
        for l in 0..p {
            let block_q = process_noise_block(
                hp.sigma2_beta,
                hp.sigma2_a,
                hp.lambda,
                correlations.rho_beta()[(j, l)],
                correlations.rho_a()[(j, l)],
                delta,
            )?;
            q.view_mut((3 * j, 3 * l), (3, 3)).copy_from(&block_q);
        }
    }
    Ok(TransitionStep { t, q })
}

/// Least-squares initial mean: regresses the first time point's observed
/// log-rates on the design matrix and places the coefficients at the level
/// positions, leaving derivatives and accelerations at zero.
pub fn data_driven_initial_mean(
    design: &DesignMatrix,
    first: &ObservationVector,
) -> Result<DVector<f64>> {
    if first.len() != design.n_ages() {
        return Err(Error::Input(format!(
            "observation vector has length {} but design has {} ages",
            first.len(),
            design.n_ages()
        )));
    }
    let observed = first.observed_indices();
    if observed.is_empty() {
        return Err(Error::Input(
            "cannot initialise from a fully missing first time point".into(),
        ));
    }
    let mut g = DMatrix::zeros(observed.len(), design.p());
    let mut y = DVector::zeros(observed.len());
    for (row, &i) in observed.iter().enumerate() {
        g.row_mut(row).copy_from(&design.matrix().row(i));
        y[row] = first.value(i);
    }
    let coeffs = g
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|m| Error::Estimation(format!("initial least squares failed: {m}")))?;

    let layout = StateLayout::new(design.p());
    let mut mean = DVector::zeros(layout.dim());
    for j in 0..layout.p() {
        mean[layout.level(j)] = coeffs[j];
    }
    Ok(mean)
}
