//! Central finite-difference verification of analytic gradients.

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
    pub pass: bool,
}

/// Denominator floor in the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_ERROR_FLOOR)
}

fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` against `(f(x + eps e_k) - f(x - eps e_k)) / (2 eps)`
/// for every coordinate `k`. Non-finite values count as failure.
pub fn finite_diff_check<F>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    tolerance: f64,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    finite_diff_check_floored(f, point, analytic, eps, tolerance, REL_ERROR_FLOOR)
}

/// As [`finite_diff_check`] with a caller-chosen denominator floor, for
/// objectives whose rounding noise in the difference quotient exceeds
/// [`REL_ERROR_FLOOR`] times the tolerance.
pub fn finite_diff_check_floored<F>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    tolerance: f64,
    floor: f64,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match point");
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: 0.0,
        coordinates: point.len(),
        pass: true,
    };
    for k in 0..point.len() {
        x[k] = point[k] + eps;
        let plus = f(&x);
        x[k] = point[k] - eps;
        let minus = f(&x);
        x[k] = point[k];
        let numeric = (plus - minus) / (2.0 * eps);
        let err = if numeric.is_finite() && analytic[k].is_finite() {
            relative_error_floored(analytic[k], numeric, floor)
        } else {
            f64::INFINITY
        };
        if err > report.max_rel_error || (k == 0 && err.is_infinite()) {
            report.max_rel_error = err;
            report.worst_coordinate = k;
            report.analytic_at_worst = analytic[k];
            report.numeric_at_worst = numeric;
        }
    }
    report.pass = report.max_rel_error.is_finite() && report.max_rel_error < tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    // f(x) = x^T A x with symmetric A; gradient 2 A x.
    fn quadratic() -> (impl Fn(&[f64]) -> f64, Vec<f64>, Vec<f64>) {
        let a = [[2.0, 0.5, -0.3], [0.5, 1.0, 0.2], [-0.3, 0.2, 3.0]];
        let f = move |x: &[f64]| {
            (0..3)
                .map(|i| (0..3).map(|j| x[i] * a[i][j] * x[j]).sum::<f64>())
                .sum::<f64>()
        };
        let x = vec![0.7, -1.2, 0.4];
        let grad = (0..3)
            .map(|i| 2.0 * (0..3).map(|j| a[i][j] * x[j]).sum::<f64>())
            .collect();
        (f, x, grad)
    }

    #[test]
    fn quadratic_form_passes_tightly() {
        let (f, x, grad) = quadratic();
        let r = finite_diff_check(f, &x, &grad, 1e-5, 1e-6);
        assert!(r.pass);
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn doubled_gradient_fails_near_one_half() {
        // |2g - g| / max(|2g|, |g|) = 1/2 for the relative-error definition;
        // a halved gradient gives the same. Injecting a factor-2 bug must fail.
        let (f, x, grad) = quadratic();
        let wrong: Vec<f64> = grad.iter().map(|g| 2.0 * g).collect();
        let r = finite_diff_check(&f, &x, &wrong, 1e-5, 1e-6);
        assert!(!r.pass);
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
        let flipped: Vec<f64> = grad.iter().map(|g| -g).collect();
        let r = finite_diff_check(&f, &x, &flipped, 1e-5, 1e-6);
        assert!((r.max_rel_error - 2.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_is_failure() {
        let r = finite_diff_check(|x| x[0].ln(), &[0.0], &[1.0], 1e-5, 1.0);
        assert!(!r.pass);
    }
}
