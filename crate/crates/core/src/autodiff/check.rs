use crate::{Error, Result};

/// Five-point central-difference gradient of `f` at `point`; the error is
/// `O(step⁴)`.
///
/// A non-finite function value is reported with the index of the component
/// being perturbed.
pub fn numeric_gradient<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::param(format!("finite-difference step must be positive, got {step}")));
    }
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    for i in 0..x.len() {
        let x0 = x[i];
        let mut at = |k: f64| {
            x[i] = x0 + k * step;
            let v = f(&x);
            x[i] = x0;
            v
        };
        let (f2, f1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        if ![f2, f1, m1, m2].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                index: i,
                message: format!("f(x + k·h·e_{i}) for k = 2, 1, −1, −2: ({f2}, {f1}, {m1}, {m2})"),
            });
        }
        out.push((8.0 * (f1 - m1) - (f2 - m2)) / (12.0 * step));
    }
    Ok(out)
}

/// Largest componentwise relative deviation between `analytic` and the
/// central-difference gradient of `f` at `point`.
///
/// The denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, analytic: &[f64], point: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::param(format!(
            "{} analytic components for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    if let Some(i) = analytic.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFinite {
            index: i,
            message: "analytic gradient is not finite".into(),
        });
    }
    let numeric = numeric_gradient(f, point, step)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] + x[0] * x[1] - 2.0 * x[1] * x[1];
        let p = [0.7, -1.3];
        let g = [6.0 * p[0] + p[1], p[0] - 4.0 * p[1]];
        assert!(finite_diff_check(f, &g, &p, 1e-4).unwrap() <= 1e-9);
    }

    #[test]
    fn constant_function() {
        let err = finite_diff_check(|_| 4.2, &[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0], 1e-4).unwrap();
        assert!(err <= 1e-8);
    }

    #[test]
    fn wrong_gradient_is_visible() {
        let err = finite_diff_check(|x| x[0] * x[0], &[1.0], &[1.0], 1e-4).unwrap();
        assert!((err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn nan_reports_component() {
        let f = |x: &[f64]| if x[1] > 1.0 { f64::NAN } else { x[0] };
        match finite_diff_check(f, &[1.0, 0.0], &[0.0, 1.0], 1e-3) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_step() {
        assert!(matches!(
            finite_diff_check(|x| x[0], &[1.0], &[0.0], 0.0),
            Err(Error::Parameter(_))
        ));
    }
}
