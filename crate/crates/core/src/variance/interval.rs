use statrs::distribution::{ContinuousCDF, Normal};

/// Standard normal quantile `z_{1 - alpha/2}`.
pub fn z_quantile(alpha: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - alpha / 2.0)
}

/// Two-sided `theta +/- z_{1-alpha/2} se` interval.
pub fn confidence_interval(theta: f64, se: f64, alpha: f64) -> (f64, f64) {
    debug_assert!(se >= 0.0 && alpha > 0.0 && alpha < 1.0);
    let half = z_quantile(alpha) * se;
    (theta - half, theta + half)
}
