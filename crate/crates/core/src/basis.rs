//! Clamped non-uniform B-spline bases over an age range.
//!
//! A basis set is defined by a strictly increasing breakpoint sequence and a
//! degree. The knot vector is clamped: the first and last breakpoints are
//! repeated `degree + 1` times, so the first basis equals one at the left
//! boundary and the last equals one at the right boundary. Evaluation uses
//! the Cox-de Boor recurrence in its stable triangular form, touching only
//! the `degree + 1` bases that are nonzero at a point.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Degree used when no explicit configuration is given (cubic).
pub const DEFAULT_DEGREE: usize = 3;

/// Interior breakpoints used by [`build_default_basis`] on the age range
/// `[0, 100]`: dense in infancy and old age, sparser through mid-life, where
/// log-mortality is smooth. Together with clamping and degree 3 this yields
/// 20 bases.
pub const DEFAULT_INTERIOR_KNOTS: [f64; 16] = [
    1.0, 3.0, 7.0, 12.0, 18.0, 25.0, 33.0, 42.0, 52.0, 62.0, 70.0, 77.0, 83.0, 88.0, 92.0, 96.0,
];

/// Step of the age grid used to locate each basis function's peak.
pub const PEAK_GRID_STEP: f64 = 0.01;

/// A clamped non-uniform B-spline basis over a closed age interval.
///
/// Holds the full (clamped) knot vector, the number of bases `p`, and the
/// precomputed peak age of every basis, i.e. the grid argmax of the basis
/// function at [`PEAK_GRID_STEP`] resolution. Peak ages are strictly
/// increasing and the first one sits at the left end of the span.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisSet {
    degree: usize,
    knots: Vec<f64>,
    p: usize,
    peak_ages: Vec<f64>,
}

impl BasisSet {
    /// Polynomial degree of every basis function.
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Full clamped knot vector, length `p + degree + 1`.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Age at which each basis attains its maximum, strictly increasing.
    pub fn peak_ages(&self) -> &[f64] {
        &self.peak_ages
    }

    /// Closed interval on which the basis set is defined.
    pub fn span(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Evaluates all `p` basis functions at `x`.
    ///
    /// At most `degree + 1` entries are nonzero and the entries sum to one
    /// everywhere on the span. Returns a domain error if `x` lies outside
    /// the span.
    pub fn evaluate(&self, x: f64) -> Result<Vec<f64>> {
        let (first, values) = self.nonzero_at(x)?;
        let mut out = vec![0.0; self.p];
        out[first..first + values.len()].copy_from_slice(&values);
        Ok(out)
    }

    /// Evaluates the `degree + 1` bases that can be nonzero at `x` and
    /// returns `(index_of_first, values)`.
    pub fn nonzero_at(&self, x: f64) -> Result<(usize, Vec<f64>)> {
        let span = self.find_span(x)?;
        let d = self.degree;
        // Triangular Cox-de Boor recurrence: `values[r]` ends up holding
        // N_{span-d+r, d}(x). Every division is by a positive knot distance.
        let mut values = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        values[0] = 1.0;
        for j in 1..=d {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        Ok((span - d, values))
    }

    /// Largest knot index `i` with `knots[i] <= x < knots[i+1]`, clamped to
    /// the valid span range so the right boundary maps to the last
    /// non-degenerate interval.
    fn find_span(&self, x: f64) -> Result<usize> {
        let (lo, hi) = self.span();
        if !x.is_finite() || x < lo || x > hi {
            return Err(Error::Domain(format!(
                "age {x} outside basis span [{lo}, {hi}]"
            )));
        }
        let last = self.knots.len() - self.degree - 2;
        if x >= self.knots[last] {
            return Ok(last);
        }
        // partition_point returns the first index with knots[i] > x; the
        // span is the preceding index. Clamping handles the repeated
        // boundary knots of the clamped vector.
        let idx = self.knots.partition_point(|&t| t <= x);
        Ok(idx.saturating_sub(1).clamp(self.degree, last))
    }
}

/// Builds a basis from strictly increasing breakpoints and a degree.
///
/// `breakpoints` must contain at least two values and `degree` must be at
/// least one. The knot vector clamps both ends, so the basis count is
/// `breakpoints.len() + degree - 1`.
pub fn build_basis(breakpoints: &[f64], degree: usize) -> Result<BasisSet> {
    if degree == 0 {
        return Err(Error::Domain("spline degree must be at least 1".into()));
    }
    if breakpoints.len() < 2 {
        return Err(Error::Domain(format!(
            "need at least 2 breakpoints, got {}",
            breakpoints.len()
        )));
    }
    if breakpoints.iter().any(|b| !b.is_finite()) {
        return Err(Error::Domain("breakpoints must be finite".into()));
    }
    if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain(
            "breakpoints must be strictly increasing".into(),
        ));
    }

    let mut knots = Vec::with_capacity(breakpoints.len() + 2 * degree);
    knots.extend(std::iter::repeat_n(breakpoints[0], degree));
    knots.extend_from_slice(breakpoints);
    knots.extend(std::iter::repeat_n(breakpoints[breakpoints.len() - 1], degree));
    let p = breakpoints.len() + degree - 1;

    let mut set = BasisSet {
        degree,
        knots,
        p,
        peak_ages: Vec::new(),
    };
    set.peak_ages = locate_peaks(&set)?;
    if set.peak_ages.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Domain(
            "basis peaks are not strictly increasing; breakpoints are too close \
             relative to the peak grid step"
                .into(),
        ));
    }
    Ok(set)
}

/// Builds the default cubic basis on `[age_min, age_max]`.
///
/// The default interior breakpoints are laid out for `[0, 100]`; for any
/// other range they are mapped affinely onto it. On `[0, 100]` this produces
/// exactly 20 cubic bases.
pub fn build_default_basis(age_min: f64, age_max: f64) -> Result<BasisSet> {
    if !(age_min.is_finite() && age_max.is_finite() && age_min < age_max) {
        return Err(Error::Domain(format!(
            "invalid age range [{age_min}, {age_max}]"
        )));
    }
    let scale = (age_max - age_min) / 100.0;
    let mut breakpoints = Vec::with_capacity(DEFAULT_INTERIOR_KNOTS.len() + 2);
    breakpoints.push(age_min);
    breakpoints.extend(
        DEFAULT_INTERIOR_KNOTS
            .iter()
            .map(|&k| age_min + k * scale),
    );
    breakpoints.push(age_max);
    build_basis(&breakpoints, DEFAULT_DEGREE)
}

/// Design matrix: basis values tabulated on a fixed age grid.
///
/// Row `i` holds all `p` basis values at `ages[i]`; rows sum to one and each
/// row has at most `degree + 1` nonzero entries. Columns have contiguous
/// support across sorted ages because each basis lives on a single knot
/// interval range.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    values: DMatrix<f64>,
    ages: Vec<f64>,
}

impl DesignMatrix {
    /// Tabulated values, one row per age, one column per basis.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Ages the rows were evaluated at.
    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    /// Number of evaluation ages (rows).
    pub fn n_ages(&self) -> usize {
        self.values.nrows()
    }

    /// Number of bases (columns).
    pub fn p(&self) -> usize {
        self.values.ncols()
    }
}

/// Tabulates the basis on `ages`, which must all lie inside the span.
pub fn design_matrix(basis: &BasisSet, ages: &[f64]) -> Result<DesignMatrix> {
    if ages.is_empty() {
        return Err(Error::Input("design matrix needs at least one age".into()));
    }
    let mut values = DMatrix::zeros(ages.len(), basis.p());
    for (i, &age) in ages.iter().enumerate() {
        let (first, nonzero) = basis.nonzero_at(age)?;
        for (offset, v) in nonzero.iter().enumerate() {
            values[(i, first + offset)] = *v;
        }
    }
    Ok(DesignMatrix {
        values,
        ages: ages.to_vec(),
    })
}

/// Finds each basis function's peak age by scanning a fixed-step grid over
/// the span and taking the first argmax.
fn locate_peaks(basis: &BasisSet) -> Result<Vec<f64>> {
    let (lo, hi) = basis.span();
    let steps = ((hi - lo) / PEAK_GRID_STEP).round() as usize;
    let mut best_value = vec![f64::NEG_INFINITY; basis.p()];
    let mut best_age = vec![lo; basis.p()];
    for i in 0..=steps {
        let x = if i == steps { hi } else { lo + i as f64 * PEAK_GRID_STEP };
        let (first, values) = basis.nonzero_at(x)?;
        for (offset, &v) in values.iter().enumerate() {
            let j = first + offset;
            if v > best_value[j] {
                best_value[j] = v;
                best_age[j] = x;
            }
        }
    }
    Ok(best_age)
}
