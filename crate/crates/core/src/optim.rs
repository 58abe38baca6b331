//! Derivative-free minimisation used by the likelihood fits.
//!
//! The objective surfaces here are smooth but expensive and have no cheap
//! gradients, so a plain Nelder-Mead simplex with standard coefficients is
//! used, restarted from Latin-hypercube points to cover the (log) parameter
//! box. Objectives may return `+inf` to encode hard bounds; the simplex
//! ordering treats those as worst.

use rand::seq::SliceRandom;
use rand::Rng;

/// Outcome of one Nelder-Mead run.
#[derive(Debug, Clone)]
pub struct NelderMeadResult {
    /// Best point found.
    pub x: Vec<f64>,
    /// Objective value at `x`.
    pub value: f64,
    /// Iterations performed (one reflection cycle each).
    pub iterations: usize,
    /// Total objective evaluations.
    pub evals: usize,
    /// Whether the spread criterion was met before the iteration cap.
    pub converged: bool,
}

/// Options for [`nelder_mead`].
#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    /// Hard cap on reflection cycles.
    pub max_iters: usize,
    /// Stop when the objective spread across the simplex falls below this.
    pub f_tol: f64,
    /// Initial displacement along each coordinate when building the simplex.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_iters: 500,
            f_tol: 1e-9,
            initial_step: 0.5,
        }
    }
}

/// Minimises `f` from `x0` with the standard Nelder-Mead moves
/// (reflection 1, expansion 2, contraction 1/2, shrink 1/2).
///
/// Non-finite objective values are treated as `+inf`, so box constraints can
/// be encoded as barriers inside `f`. Fully deterministic for a given
/// objective and starting point.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], options: &NelderMeadOptions) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    assert!(dim > 0, "cannot optimise a zero-dimensional objective");
    let clean = |v: f64| if v.is_finite() { v } else { f64::INFINITY };
    let mut evals = 0;
    let eval = |x: &[f64], f: &mut F, evals: &mut usize| -> f64 {
        *evals += 1;
        clean(f(x))
    };

    // Initial simplex: x0 plus a step along each coordinate.
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    let v0 = eval(x0, &mut f, &mut evals);
    simplex.push((x0.to_vec(), v0));
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += options.initial_step;
        let v = eval(&x, &mut f, &mut evals);
        simplex.push((x, v));
    }

    let order = |s: &mut Vec<(Vec<f64>, f64)>| {
        s.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("objective returned NaN"));
    };
    order(&mut simplex);

    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iters {
        iterations += 1;
        let spread = simplex[dim].1 - simplex[0].1;
        if spread.is_finite() && spread < options.f_tol {
            converged = true;
            break;
        }

        // Centroid of all points but the worst.
        let mut centroid = vec![0.0; dim];
        for (x, _) in simplex.iter().take(dim) {
            for (c, xi) in centroid.iter_mut().zip(x.iter()) {
                *c += xi;
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let worst = simplex[dim].clone();
        let at = |coef: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(worst.0.iter())
                .map(|(c, w)| c + coef * (c - w))
                .collect()
        };

        let reflected = at(1.0);
        let f_reflected = eval(&reflected, &mut f, &mut evals);

        if f_reflected < simplex[0].1 {
            // Try to go further in the same direction.
            let expanded = at(2.0);
            let f_expanded = eval(&expanded, &mut f, &mut evals);
            simplex[dim] = if f_expanded < f_reflected {
                (expanded, f_expanded)
            } else {
                (reflected, f_reflected)
            };
        } else if f_reflected < simplex[dim - 1].1 {
            simplex[dim] = (reflected, f_reflected);
        } else {
            // Contract toward the centroid, outside or inside.
            let (contracted, f_contracted) = if f_reflected < worst.1 {
                let x = at(0.5);
                let v = eval(&x, &mut f, &mut evals);
                (x, v)
            } else {
                let x = at(-0.5);
                let v = eval(&x, &mut f, &mut evals);
                (x, v)
            };
            if f_contracted < worst.1.min(f_reflected) {
                simplex[dim] = (contracted, f_contracted);
            } else {
                // Shrink everything toward the current best point.
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    for (xi, bi) in entry.0.iter_mut().zip(best.iter()) {
                        *xi = bi + 0.5 * (*xi - bi);
                    }
                    entry.1 = eval(&entry.0.clone(), &mut f, &mut evals);
                }
            }
        }
        order(&mut simplex);
    }

    NelderMeadResult {
        x: simplex[0].0.clone(),
        value: simplex[0].1,
        iterations,
        evals,
        converged,
    }
}

/// Latin hypercube sample of `n` points inside the given per-coordinate
/// bounds: each coordinate is split into `n` equal strata, every stratum is
/// hit exactly once, and positions within strata are uniform.
pub fn latin_hypercube<R: Rng>(rng: &mut R, n: usize, bounds: &[(f64, f64)]) -> Vec<Vec<f64>> {
    assert!(n > 0, "need at least one sample");
    for &(lo, hi) in bounds {
        assert!(lo < hi, "invalid bounds ({lo}, {hi})");
    }
    let mut points = vec![vec![0.0; bounds.len()]; n];
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (i, &stratum) in strata.iter().enumerate() {
            let u: f64 = rng.random();
            points[i][d] = lo + (hi - lo) * ((stratum as f64 + u) / n as f64);
        }
    }
    points
}
