//! Order statistics and moments used by the forecast and backtest layers.

/// Median of a slice (average of the two central order statistics for even
/// lengths). Panics on an empty slice; callers validate beforehand.
pub(crate) fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("median over NaN"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Linear-interpolation quantile (the common "type 7" definition used by
/// NumPy and R defaults): index `h = q (n - 1)` interpolated between the
/// surrounding order statistics. `q` must lie in `[0, 1]`.
pub(crate) fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile level out of range");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("quantile over NaN"));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Unbiased sample variance (denominator `n - 1`). Returns 0 for a single
/// observation.
pub(crate) fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    assert!(n > 0, "variance of empty slice");
    if n == 1 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
}
