use crate::diffnet::ParamVector;

use super::SolverError;

/// Conjugate gradient for `A x = rhs` with `A` symmetric positive definite,
/// given only as a matrix-vector product.
pub fn conjugate_gradient<F>(
    mut apply: F,
    rhs: &ParamVector,
    iters: usize,
    tol: f64,
) -> Result<ParamVector, SolverError>
where
    F: FnMut(&ParamVector) -> Result<ParamVector, SolverError>,
{
    let n = rhs.len();
    let mut x = ParamVector::zeros(n);
    let rhs_norm = rhs.norm();
    if rhs_norm == 0.0 {
        return Ok(x);
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    for it in 0..iters {
        let ap = apply(&p)?;
        let pap = p.dot(&ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(SolverError::NotPositiveDefinite {
                iteration: it,
                curvature: pap,
            });
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        let rr_new = r.dot(&r);
        if !rr_new.is_finite() || !x.is_finite() {
            return Err(SolverError::NonFinite("conjugate gradient iterate"));
        }
        if rr_new.sqrt() <= tol * rhs_norm {
            break;
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(r.iter()) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    Ok(x)
}
