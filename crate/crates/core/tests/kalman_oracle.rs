//! Checks the recursive filter, smoother and likelihood against brute-force
//! conditioning of the stacked joint normal on randomized small instances.

mod common;

use bsp_core::kalman::{fast_loglik, filter, smooth};
use common::{dense_analysis, random_instance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-8;

fn max_abs_diff(a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>) -> f64 {
    (a - b).amax()
}

fn max_abs_diff_mat(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    (a - b).amax()
}

#[test]
fn recursions_match_dense_conditioning_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for instance in 0..30 {
        let (model, observations) = random_instance(&mut rng);
        let oracle = dense_analysis(&model, &observations);

        let fr = filter(&model, &observations).unwrap();
        let sm = smooth(&model, &fr).unwrap();

        for t in 0..model.n_times() {
            assert!(
                max_abs_diff(&fr.predicted[t].mean, &oracle.predicted_means[t]) < TOL,
                "instance {instance}, time {t}: predicted mean"
            );
            assert!(
                max_abs_diff_mat(&fr.predicted[t].cov, &oracle.predicted_covs[t]) < TOL,
                "instance {instance}, time {t}: predicted covariance"
            );
            assert!(
                max_abs_diff(&fr.filtered[t].mean, &oracle.filtered_means[t]) < TOL,
                "instance {instance}, time {t}: filtered mean"
            );
            assert!(
                max_abs_diff_mat(&fr.filtered[t].cov, &oracle.filtered_covs[t]) < TOL,
                "instance {instance}, time {t}: filtered covariance"
            );
            assert!(
                max_abs_diff(&sm.smoothed[t].mean, &oracle.smoothed_means[t]) < TOL,
                "instance {instance}, time {t}: smoothed mean"
            );
            assert!(
                max_abs_diff_mat(&sm.smoothed[t].cov, &oracle.smoothed_covs[t]) < TOL,
                "instance {instance}, time {t}: smoothed covariance"
            );
        }
        assert!(
            (fr.log_likelihood - oracle.log_likelihood).abs() < TOL,
            "instance {instance}: filter loglik {} vs dense {}",
            fr.log_likelihood,
            oracle.log_likelihood
        );
        let fast = fast_loglik(&model, &observations).unwrap();
        assert!(
            (fast - oracle.log_likelihood).abs() < TOL,
            "instance {instance}: sequential loglik {fast} vs dense {}",
            oracle.log_likelihood
        );
    }
}
