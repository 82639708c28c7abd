/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the worst relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, per unit of
    /// `max(1, |f(theta)|)`: central differences carry a roundoff error
    /// proportional to `|f|`, so gradients below this scale are compared
    /// in absolute terms.
    pub floor: f64,
    /// A coordinate whose one-sided slopes disagree by more than this fraction
    /// of their magnitude straddles a kink (ReLU, max, min) and is skipped.
    pub kink_rel: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            kink_rel: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `f` at `theta` for the
/// listed coordinates (all coordinates when `coords` is empty).
///
/// Relative error is `|a - n| / max(|a|, |n|, floor * max(1, |f(theta)|))`.
pub fn grad_check(
    theta: &[f64],
    analytic: &[f64],
    coords: &[usize],
    opts: GradCheckOptions,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheckReport {
    assert!(opts.eps > 0.0, "grad_check: eps must be positive");
    assert_eq!(theta.len(), analytic.len());
    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..theta.len()).collect();
        &all[..]
    } else {
        coords
    };
    let f0 = f(theta);
    let floor = opts.floor * f0.abs().max(1.0);
    let mut x = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: None,
        checked: 0,
        skipped_kinks: 0,
        passed: true,
    };
    for &i in coords {
        x[i] = theta[i] + opts.eps;
        let fp = f(&x);
        x[i] = theta[i] - opts.eps;
        let fm = f(&x);
        x[i] = theta[i];
        let right = (fp - f0) / opts.eps;
        let left = (f0 - fm) / opts.eps;
        let slope_scale = left.abs().max(right.abs()).max(floor);
        if (right - left).abs() > opts.kink_rel * slope_scale {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * opts.eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst_coord.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst_coord = Some(i);
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    report
}
