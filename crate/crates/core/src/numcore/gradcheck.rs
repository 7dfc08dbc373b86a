use super::Tensor;

/// Denominator floor of the relative error, so near-zero gradients are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub n_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradient returned by `computation` against central
/// differences with step `h` on every coordinate of every input.
pub fn grad_check<F>(computation: F, inputs: &[Tensor], h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, analytic) = computation(inputs);
    assert_eq!(analytic.len(), inputs.len(), "one gradient per input");
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        n_checked: 0,
        tol,
        passed: true,
    };
    for (i, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.dims(), inputs[i].dims(), "gradient {i} shape");
        for j in 0..inputs[i].len() {
            let orig = work[i].values()[j];
            work[i].values_mut()[j] = orig + h;
            let (plus, _) = computation(&work);
            work[i].values_mut()[j] = orig - h;
            let (minus, _) = computation(&work);
            work[i].values_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.values()[j];
            let err = relative_error(a, numeric);
            report.n_checked += 1;
            if err > report.max_rel_error || !err.is_finite() || report.worst.is_none() {
                report.max_rel_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(p: &[Tensor]) -> (f64, Vec<Tensor>) {
        let w = [3.0, -2.0, 0.5];
        let v = p[0].values().iter().zip(&w).map(|(a, b)| a * b).sum();
        (v, vec![Tensor::vector(w.to_vec()).unwrap()])
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![0.3, 1.7, -4.0]).unwrap();
        let r = grad_check(linear, &[x], 1e-5, 1e-6);
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.n_checked, 3);
    }

    #[test]
    fn sign_flipped_backward_fails() {
        let x = Tensor::vector(vec![0.3, 1.7, -4.0]).unwrap();
        let corrupted = |p: &[Tensor]| {
            let (v, mut g) = linear(p);
            g[0].scale(-1.0);
            (v, g)
        };
        let r = grad_check(corrupted, &[x], 1e-5, 1e-4);
        assert!(!r.passed);
        assert!(r.max_rel_error > 1.0);
    }
}
