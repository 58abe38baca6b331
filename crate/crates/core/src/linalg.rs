//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

/// Jitter added to a matrix diagonal when a first Cholesky attempt fails.
pub(crate) const CHOLESKY_JITTER: f64 = 1e-10;

/// Forces exact symmetry by averaging a matrix with its transpose, damping
/// the round-off drift that accumulates over repeated filter updates.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Cholesky factorisation with a single retry after adding `CHOLESKY_JITTER`
/// to the diagonal. Returns `None` if the jittered matrix still fails.
pub(crate) fn cholesky_with_jitter(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Some(chol);
    }
    let mut jittered = m.clone();
    for i in 0..jittered.nrows() {
        jittered[(i, i)] += CHOLESKY_JITTER;
    }
    Cholesky::new(jittered)
}

/// A factor `L` with `L L^T = cov`, usable for sampling.
///
/// Tries a plain Cholesky first; for covariances that are only positive
/// semidefinite (exactly singular process noise, zero initial covariance)
/// falls back to a symmetric eigendecomposition with negative eigenvalues
/// clamped to zero. No jitter is added: a degenerate covariance must yield
/// exactly degenerate samples.
pub(crate) fn sampling_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = Cholesky::new(cov.clone()) {
        return chol.unpack();
    }
    let eig = cov.clone().symmetric_eigen();
    let mut factor = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let scale = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(scale);
    }
    factor
}

/// Draws one sample from a multivariate normal with the given moments.
pub(crate) fn sample_mvn<R: Rng>(
    rng: &mut R,
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
) -> DVector<f64> {
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample(StandardNormal));
    mean + factor * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetrize_averages_off_diagonal() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 5.0]);
        symmetrize(&mut m);
        assert_eq!(m[(0, 1)], 3.0);
        assert_eq!(m[(1, 0)], 3.0);
    }

    #[test]
    fn sampling_factor_handles_singular_covariance() {
        // Rank-1 covariance: Cholesky fails, the eigen fallback must not.
        let v = DVector::from_vec(vec![1.0, 2.0, -1.0]);
        let cov = &v * v.transpose();
        let factor = sampling_factor(&cov);
        let rebuilt = &factor * factor.transpose();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(rebuilt[(i, j)], cov[(i, j)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn samples_have_requested_moments() {
        let mean = DVector::from_vec(vec![1.0, -2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let factor = sampling_factor(&cov);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 20_000;
        let draws: Vec<DVector<f64>> = (0..n).map(|_| sample_mvn(&mut rng, &mean, &factor)).collect();
        let emp_mean = draws.iter().sum::<DVector<f64>>() / n as f64;
        assert_abs_diff_eq!(emp_mean[0], 1.0, epsilon = 0.05);
        assert_abs_diff_eq!(emp_mean[1], -2.0, epsilon = 0.05);
        let mut cov01 = 0.0;
        for d in &draws {
            cov01 += (d[0] - emp_mean[0]) * (d[1] - emp_mean[1]);
        }
        cov01 /= (n - 1) as f64;
        assert_abs_diff_eq!(cov01, 0.6, epsilon = 0.08);
    }
}
