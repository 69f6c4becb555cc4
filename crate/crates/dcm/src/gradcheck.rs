//! Finite-difference gradient oracle.
//!
//! Central differences over a flat parameter vector, compared coordinate by
//! coordinate against an analytic gradient. This is the independent check
//! every backward pass in the crate is held to; it only ever calls the
//! forward path.

use crate::error::{DcmError, Result};
use crate::scalar::Scalar;

/// Default perturbation size.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compare `analytic` against central differences of `f` at `params`.
///
/// Returns the maximum relative error over all coordinates, where the
/// relative error uses `max(1, |analytic|)` as denominator so near-zero
/// gradients are compared absolutely.
pub fn finite_difference_check<F, Func>(
    mut f: Func,
    params: &[F],
    analytic: &[F],
    eps: F,
) -> Result<F>
where
    F: Scalar,
    Func: FnMut(&[F]) -> F,
{
    if eps <= F::zero() {
        return Err(DcmError::InvalidParameter(
            "finite-difference eps must be positive".into(),
        ));
    }
    if params.len() != analytic.len() {
        return Err(DcmError::LengthMismatch {
            op: "finite_difference_check",
            expected: params.len(),
            got: analytic.len(),
        });
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(DcmError::NonFinite {
            op: "finite_difference_check params",
        });
    }

    let mut work = params.to_vec();
    let two = F::from_f64(2.0);
    let mut max_rel = F::zero();
    for i in 0..work.len() {
        let original = work[i];
        work[i] = original + eps;
        let plus = f(&work);
        work[i] = original - eps;
        let minus = f(&work);
        work[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DcmError::NonFinite {
                op: "finite_difference_check evaluation",
            });
        }
        let numeric = (plus - minus) / (two * eps);
        let denom = F::one().max(analytic[i].abs());
        let rel = (numeric - analytic[i]).abs() / denom;
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
