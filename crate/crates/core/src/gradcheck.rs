//! Central-difference gradient checking.

/// Step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so components whose true
/// gradient is ~0 are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `loss` at `params`.
pub fn gradient_check<F>(mut loss: F, params: &[f64], analytic: &[f64], tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one analytic entry per parameter");
    let mut probe = params.to_vec();
    let mut worst = (0.0f64, 0usize);
    for j in 0..params.len() {
        probe[j] = params[j] + FD_STEP;
        let plus = loss(&probe);
        probe[j] = params[j] - FD_STEP;
        let minus = loss(&probe);
        probe[j] = params[j];
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(analytic[j], numeric);
        // NaN counts as the worst possible error.
        if err.is_nan() || err > worst.0 {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, j);
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: params.len(),
        tolerance,
        passed: worst.0 < tolerance,
    }
}
