//! Cross-basis correlation structure.
//!
//! The coefficient processes of nearby bases move together; "nearby" is
//! measured by the distance between basis peak ages. This module evaluates
//! stationary correlation kernels on those distances and assembles the two
//! correlation matrices that scale the process noise: one for the trend
//! level and one for the local acceleration component.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::error::{Error, Result};

/// Kernel families available for the cross-basis correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Matern,
    SquaredExponential,
}

/// A stationary correlation kernel: family plus its parameters.
///
/// `smoothness` is only meaningful for the Matern family and must be a
/// half-integer (1/2, 3/2, 5/2, ...), for which the kernel has an exact
/// closed form. `length_scale` is in years of age.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub smoothness: f64,
    pub length_scale: f64,
}

impl KernelConfig {
    /// Validates parameters and returns the config.
    pub fn new(family: KernelFamily, smoothness: f64, length_scale: f64) -> Result<Self> {
        let config = KernelConfig {
            family,
            smoothness,
            length_scale,
        };
        config.validate()?;
        Ok(config)
    }

    /// Exponential kernel: Matern with smoothness 1/2 and the given length
    /// scale. This is the default for the trend-level correlation.
    pub fn exponential(length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern, 0.5, length_scale)
    }

    fn validate(&self) -> Result<()> {
        if !(self.length_scale.is_finite() && self.length_scale > 0.0) {
            return Err(Error::Domain(format!(
                "length scale must be positive, got {}",
                self.length_scale
            )));
        }
        if self.family == KernelFamily::Matern {
            half_integer_order(self.smoothness)?;
        }
        Ok(())
    }

    /// Correlation at distance `d >= 0`.
    pub fn correlation(&self, d: f64) -> Result<f64> {
        self.validate()?;
        match self.family {
            KernelFamily::Matern => matern(d, self.smoothness, self.length_scale),
            KernelFamily::SquaredExponential => squared_exponential(d, self.length_scale),
        }
    }
}

/// How to correlate a block of coefficient processes across bases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum CorrelationSpec {
    /// No cross-basis correlation (identity matrix).
    Identity,
    /// Kernel evaluated on peak-age distances.
    Kernel(KernelConfig),
}

/// The pair of correlation matrices used by the process noise: `rho_beta`
/// couples the trend levels and derivatives, `rho_a` couples the local
/// acceleration components. Both are symmetric with unit diagonal.
#[derive(Debug, Clone)]
pub struct CorrelationPair {
    rho_beta: DMatrix<f64>,
    rho_a: DMatrix<f64>,
}

impl CorrelationPair {
    /// Builds the pair from explicit matrices. Both must be square, equally
    /// sized, symmetric and have unit diagonals.
    pub fn from_matrices(rho_beta: DMatrix<f64>, rho_a: DMatrix<f64>) -> Result<Self> {
        for (name, m) in [("rho_beta", &rho_beta), ("rho_a", &rho_a)] {
            if m.nrows() != m.ncols() {
                return Err(Error::Input(format!("{name} must be square")));
            }
            if m.nrows() != rho_beta.nrows() {
                return Err(Error::Input(
                    "correlation matrices must have equal size".into(),
                ));
            }
            for j in 0..m.nrows() {
                if (m[(j, j)] - 1.0).abs() > 1e-12 {
                    return Err(Error::Input(format!("{name} must have a unit diagonal")));
                }
                for l in 0..j {
                    if (m[(j, l)] - m[(l, j)]).abs() > 1e-12 {
                        return Err(Error::Input(format!("{name} must be symmetric")));
                    }
                }
            }
        }
        Ok(CorrelationPair { rho_beta, rho_a })
    }

    /// Uncorrelated bases: both matrices are the identity.
    pub fn identity(p: usize) -> Self {
        CorrelationPair {
            rho_beta: DMatrix::identity(p, p),
            rho_a: DMatrix::identity(p, p),
        }
    }

    /// Trend-level correlation matrix (`p x p`).
    pub fn rho_beta(&self) -> &DMatrix<f64> {
        &self.rho_beta
    }

    /// Acceleration correlation matrix (`p x p`).
    pub fn rho_a(&self) -> &DMatrix<f64> {
        &self.rho_a
    }

    /// Number of bases both matrices are sized for.
    pub fn p(&self) -> usize {
        self.rho_beta.nrows()
    }
}

/// Matern correlation at distance `d` for half-integer smoothness `nu` and
/// length scale `ell`.
///
/// For `nu = m + 1/2` the kernel is `exp(-s) * poly(s)` with
/// `s = sqrt(2 nu) d / ell`; the first orders are `exp(-s)`, `(1+s)exp(-s)`
/// and `(1 + s + s^2/3)exp(-s)`. Distances must be nonnegative and the
/// result lies in `(0, 1]` with `matern(0, ..) == 1`.
pub fn matern(d: f64, nu: f64, ell: f64) -> Result<f64> {
    if !(d.is_finite() && d >= 0.0) {
        return Err(Error::Domain(format!("distance must be >= 0, got {d}")));
    }
    if !(ell.is_finite() && ell > 0.0) {
        return Err(Error::Domain(format!(
            "length scale must be positive, got {ell}"
        )));
    }
    let m = half_integer_order(nu)?;
    if d == 0.0 {
        return Ok(1.0);
    }
    let s = (2.0 * nu).sqrt() * d / ell;

    // exp(-s) * m!/(2m)! * sum_{i=0..m} (m+i)!/(i!(m-i)!) (2s)^(m-i),
    // accumulated with running factorial ratios to stay in f64 range.
    let mut sum = 0.0;
    for i in 0..=m {
        let mut coeff = 1.0;
        // (m+i)! / (2m)!  (denominator folded in so the total stays bounded)
        for k in (m + i + 1)..=(2 * m) {
            coeff /= k as f64;
        }
        // m! / (i! (m-i)!)
        for k in (i + 1)..=m {
            coeff *= k as f64;
        }
        for k in 2..=(m - i) {
            coeff /= k as f64;
        }
        sum += coeff * (2.0 * s).powi((m - i) as i32);
    }
    Ok((-s).exp() * sum)
}

/// Squared-exponential correlation `exp(-d^2 / (2 ell^2))`.
pub fn squared_exponential(d: f64, ell: f64) -> Result<f64> {
    if !(d.is_finite() && d >= 0.0) {
        return Err(Error::Domain(format!("distance must be >= 0, got {d}")));
    }
    if !(ell.is_finite() && ell > 0.0) {
        return Err(Error::Domain(format!(
            "length scale must be positive, got {ell}"
        )));
    }
    Ok((-d * d / (2.0 * ell * ell)).exp())
}

/// Checks that `nu` is a half-integer `m + 1/2` and returns `m`.
fn half_integer_order(nu: f64) -> Result<usize> {
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::Domain(format!(
            "smoothness must be positive, got {nu}"
        )));
    }
    let m = nu - 0.5;
    let rounded = m.round();
    if (m - rounded).abs() > 1e-9 || !(0.0..=30.0).contains(&rounded) {
        return Err(Error::Domain(format!(
            "smoothness must be a half-integer m + 1/2 with m <= 30, got {nu}"
        )));
    }
    Ok(rounded as usize)
}

/// Builds the correlation pair for a basis set from kernel configurations.
///
/// The trend-level matrix always comes from a kernel on peak-age distances;
/// the acceleration matrix is either the identity (default) or a kernel of
/// its own. Both results are symmetric positive semidefinite with unit
/// diagonal by construction.
pub fn build_correlations(
    basis: &BasisSet,
    beta_kernel: &KernelConfig,
    a_spec: &CorrelationSpec,
) -> Result<CorrelationPair> {
    let rho_beta = kernel_matrix(basis.peak_ages(), beta_kernel)?;
    let rho_a = match a_spec {
        CorrelationSpec::Identity => DMatrix::identity(basis.p(), basis.p()),
        CorrelationSpec::Kernel(config) => kernel_matrix(basis.peak_ages(), config)?,
    };
    Ok(CorrelationPair { rho_beta, rho_a })
}

fn kernel_matrix(peaks: &[f64], config: &KernelConfig) -> Result<DMatrix<f64>> {
    let p = peaks.len();
    let mut rho = DMatrix::identity(p, p);
    for j in 0..p {
        for l in (j + 1)..p {
            let value = config.correlation((peaks[j] - peaks[l]).abs())?;
            rho[(j, l)] = value;
            rho[(l, j)] = value;
        }
    }
    Ok(rho)
}
