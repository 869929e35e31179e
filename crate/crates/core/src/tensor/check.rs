//! Finite-difference oracles for gradient verification.
//!
//! Central differences with step h = cbrt(machine epsilon) scaled by the
//! magnitude of each coordinate. Used by test suites across the crate; kept
//! independent of the tape so it can stand as an oracle for it.

use super::Real;

/// Machine-epsilon-derived step size for central differences.
pub fn fd_step(x: Real) -> Real {
    Real::EPSILON.cbrt() * x.abs().max(1.0)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference_grad(f: impl Fn(&[Real]) -> Real, x: &[Real]) -> Vec<Real> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = fd_step(x[i]);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative L2 error between an analytic gradient and its oracle.
pub fn rel_error(analytic: &[Real], numeric: &[Real]) -> Real {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        diff += (a - n) * (a - n);
        norm += n * n;
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}
