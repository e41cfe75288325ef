use super::tensor::Parameter;
use crate::error::{PiernError, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per parameter, in parameter order.
    pub max_rel_error: Vec<f64>,
    pub passed: bool,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares analytic gradients against central differences.
///
/// `loss_fn` must return the loss and leave analytic gradients in each
/// parameter's `grad` (it is responsible for zeroing them first). Relative
/// error is `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps entries whose
/// true gradient is near zero from dominating the report.
pub fn grad_check<F>(mut loss_fn: F, params: &mut [Parameter], tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut [Parameter]) -> Result<f64>,
{
    let first = loss_fn(params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad.data().to_vec()).collect();
    let second = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(PiernError::NonDeterministic { first, second });
    }

    let mut max_rel_error = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut worst: f64 = 0.0;
        for j in 0..params[pi].value.len() {
            let orig = params[pi].value.data()[j];
            let h = STEP * orig.abs().max(1.0);
            params[pi].value.data_mut()[j] = orig + h;
            let up = loss_fn(params)?;
            params[pi].value.data_mut()[j] = orig - h;
            let down = loss_fn(params)?;
            params[pi].value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if !rel.is_finite() {
                return Err(PiernError::NonFinite("grad_check"));
            }
            worst = worst.max(rel);
        }
        max_rel_error.push(worst);
    }
    // leave analytic gradients in place for the caller
    loss_fn(params)?;
    let passed = max_rel_error.iter().all(|&e| e <= tolerance);
    Ok(GradCheckReport {
        max_rel_error,
        passed,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use std::cell::Cell;

    fn scalar(v: f64) -> Vec<Parameter> {
        vec![Parameter::new(Tensor::from_vec(vec![v]))]
    }

    #[test]
    fn linear_function_passes() {
        let mut p = scalar(1.0);
        let report = grad_check(
            |ps| {
                let w = ps[0].w()[0];
                ps[0].g()[0] = 2.0;
                Ok(2.0 * w)
            },
            &mut p,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn square_passes() {
        let mut p = scalar(3.0);
        let report = grad_check(
            |ps| {
                let w = ps[0].w()[0];
                ps[0].g()[0] = 2.0 * w;
                Ok(w * w)
            },
            &mut p,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(p[0].grad.data()[0], 6.0);
    }

    #[test]
    fn scaled_gradient_fails() {
        let mut p = scalar(3.0);
        let report = grad_check(
            |ps| {
                let w = ps[0].w()[0];
                ps[0].g()[0] = 1.1 * 2.0 * w;
                Ok(w * w)
            },
            &mut p,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.worst() > 0.05);
    }

    #[test]
    fn nondeterministic_loss_is_an_error() {
        let mut p = scalar(0.5);
        let calls = Cell::new(0u32);
        let err = grad_check(
            |ps| {
                calls.set(calls.get() + 1);
                ps[0].g()[0] = 1.0;
                Ok(ps[0].w()[0] + calls.get() as f64)
            },
            &mut p,
            DEFAULT_TOLERANCE,
        )
        .unwrap_err();
        assert!(matches!(err, PiernError::NonDeterministic { .. }));
    }
}
