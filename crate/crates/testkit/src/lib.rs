//! Test-only oracles shared by the workspace test suites.
//!
//! Everything here is deliberately independent of `csnas-core`: the oracles
//! recompute quantities from their defining formulas (in extended precision
//! where it matters) so the production implementations have something honest
//! to be compared against.

pub mod dd;
pub mod nce;

/// Relative error with a floor so that near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], i: usize, eps: f64, mut f: F) -> f64 {
    let mut plus = x.to_vec();
    plus[i] += eps;
    let mut minus = x.to_vec();
    minus[i] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}
