//! Central finite-difference gradient verification.

use super::OpError;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Indices whose relative error exceeds the tolerance.
    pub failures: Vec<usize>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with an absolute floor so that two near-zero gradients
/// compare as equal instead of dividing noise by noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-10;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compare `analytic` with `(f(x + h e_i) - f(x - h e_i)) / 2h` for every `i`.
pub fn gradient_check(
    f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, OpError> {
    let indices: Vec<usize> = (0..point.len()).collect();
    gradient_check_subset(f, point, analytic, &indices, h, tol)
}

/// As [`gradient_check`], restricted to `indices`; entries of the report
/// follow the order of `indices`.
pub fn gradient_check_subset(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    indices: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, OpError> {
    if analytic.len() != point.len() {
        return Err(OpError::GradientLength { expected: point.len(), found: analytic.len() });
    }
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(indices.len());
    let mut rel_errors = Vec::with_capacity(indices.len());
    let mut failures = Vec::new();
    for &i in indices {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        for v in [plus, minus] {
            if !v.is_finite() {
                return Err(OpError::NonFinite { index: i, value: v });
            }
        }
        let n = (plus - minus) / (2.0 * h);
        let e = relative_error(analytic[i], n);
        if e > tol {
            failures.push(i);
        }
        numeric.push(n);
        rel_errors.push(e);
    }
    let (worst, max) =
        rel_errors.iter().copied().enumerate().fold((0, 0.0), |acc, (k, e)| if e > acc.1 { (k, e) } else { acc });
    Ok(GradCheckReport {
        numeric,
        rel_errors,
        max_rel_error: max,
        worst_index: indices.get(worst).copied().unwrap_or(0),
        failures,
        tolerance: tol,
    })
}
