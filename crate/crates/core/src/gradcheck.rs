//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Magnitudes below this are compared on an absolute rather than relative scale,
/// so roundoff on vanishing gradients does not read as a mismatch.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares `analytic` against `(f(x + εe_i) − f(x − εe_i)) / 2ε` for every coordinate.
pub fn finite_difference_check<F>(mut f: F, x: &[f64], analytic: &[f64], epsilon: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(Error::Dimension {
            op: "finite_difference_check",
            axis: "gradient",
            expected: x.len(),
            actual: analytic.len(),
        });
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Config("finite-difference epsilon must be positive".into()));
    }
    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.len() {
        probe[i] = x[i] + epsilon;
        let up = f(&probe)?;
        probe[i] = x[i] - epsilon;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite("finite_difference_check"));
        }
        let estimate = (up - down) / (2.0 * epsilon);
        let err = relative_error(analytic[i], estimate);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(estimate);
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = [0.3, -1.2, 4.0];
        let report = finite_difference_check(|_| Ok(7.0), &x, &[0.0; 3], 1e-5).unwrap();
        assert_eq!(report.max_relative_error, 0.0);
        assert!(report.numeric.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = [1.0, 2.0];
        let f = |v: &[f64]| Ok(v[0] * v[0] + 3.0 * v[1]);
        let good = finite_difference_check(f, &x, &[2.0, 3.0], 1e-5).unwrap();
        assert!(good.max_relative_error < 1e-8);
        let bad = finite_difference_check(f, &x, &[2.0, 3.3], 1e-5).unwrap();
        assert_eq!(bad.worst_index, 1);
        assert!(bad.max_relative_error > 0.05);
    }

    #[test]
    fn non_finite_is_reported() {
        let r = finite_difference_check(|_| Ok(f64::NAN), &[0.0], &[0.0], 1e-5);
        assert_eq!(r, Err(Error::NonFinite("finite_difference_check")));
    }
}
