//! Central finite-difference gradient verification.
//!
//! Independent of the tape: it only evaluates a black-box scalar function at
//! perturbed inputs, so it can serve as the oracle for every analytic
//! gradient in the crate.

use ndarray::Array2;

/// Relative error between an analytic derivative and its central-difference
/// estimate, guarded for near-zero pairs.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-10 {
        return 0.0;
    }
    (analytic - numeric).abs() / denom
}

/// Central finite-difference gradient of `f` at `x`, one entry at a time.
pub fn numeric_grad(x: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = xp[idx];
        let h = 1e-5 * orig.abs().max(1.0);
        xp[idx] = orig + h;
        let fp = f(&xp);
        xp[idx] = orig - h;
        let fm = f(&xp);
        xp[idx] = orig;
        g[idx] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Maximum relative error between `analytic` and the central-difference
/// gradient of `f` at `x`.
pub fn max_rel_err(
    x: &Array2<f64>,
    f: impl FnMut(&Array2<f64>) -> f64,
    analytic: &Array2<f64>,
) -> f64 {
    let numeric = numeric_grad(x, f);
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Asserts the analytic gradient produced by `grad_fn` matches central
/// differences of `f` at `x` within `tol` relative error.
pub fn check_grad(
    x: &Array2<f64>,
    f: impl FnMut(&Array2<f64>) -> f64,
    grad_fn: impl FnOnce(&Array2<f64>) -> Array2<f64>,
    tol: f64,
) {
    let analytic = grad_fn(x);
    let err = max_rel_err(x, f, &analytic);
    assert!(
        err < tol,
        "gradient check failed: max relative error {err:.3e} >= {tol:.1e}"
    );
}
