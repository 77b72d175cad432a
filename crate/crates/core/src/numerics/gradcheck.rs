use super::Scalar;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Per-element error: relative where the numerical gradient exceeds
    /// `abs_floor` in magnitude, absolute otherwise.
    pub errors: Vec<f64>,
    pub numerical: Vec<f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub const ABS_FLOOR: f64 = 1e-5;

/// Central-difference check of `analytic` (the autodiff gradient of `f` at
/// `point`) with step `h`.
pub fn finite_difference_check<T, F>(mut f: F, point: &[T], analytic: &[T], h: T, tol: f64) -> GradCheckReport
where
    T: Scalar,
    F: FnMut(&[T]) -> f64,
{
    assert_eq!(point.len(), analytic.len(), "gradient length must match the point");
    assert!(h > T::zero(), "finite-difference step must be positive");
    let mut x = point.to_vec();
    let mut errors = Vec::with_capacity(point.len());
    let mut numerical = Vec::with_capacity(point.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        // the perturbation actually representable in T
        let span = (orig + h).to_f64().unwrap() - (orig - h).to_f64().unwrap();
        let num = (up - down) / span;
        let diff = (analytic[i].to_f64().unwrap() - num).abs();
        errors.push(if num.abs() > ABS_FLOOR { diff / num.abs() } else { diff });
        numerical.push(num);
    }
    let max_rel_err = errors.iter().copied().fold(0.0, f64::max);
    GradCheckReport {
        max_rel_err,
        errors,
        numerical,
        tol,
    }
}
