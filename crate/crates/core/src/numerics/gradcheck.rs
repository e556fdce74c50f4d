use crate::error::{Error, Result};

/// Denominator floor for relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Relative error `|a-n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `f` around `point`.
pub fn finite_difference_check<F>(
    mut f: F,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} coordinates but {} analytic partials",
            point.len(),
            analytic.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "loss not finite when perturbing coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > worst.max_rel_error || i == 0 {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear() {
        let c = [1.5, -2.0, 0.25];
        let f = |x: &[f64]| x.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();
        let r = finite_difference_check(f, &[0.1, 0.2, 0.3], &c, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn quadratic_at_three() {
        let r = finite_difference_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-3).unwrap();
        assert!((r.numeric - 6.0).abs() < 1e-6);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn flags_doubled_gradient() {
        let r = finite_difference_check(|x| x[0] * x[0], &[3.0], &[12.0], 1e-3).unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6);
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn rejects_bad_eps_and_nonfinite() {
        assert!(finite_difference_check(|x| x[0], &[1.0], &[1.0], 0.0).is_err());
        assert!(finite_difference_check(|x| x[0].ln(), &[0.0], &[1.0], 1e-3).is_err());
    }
}
