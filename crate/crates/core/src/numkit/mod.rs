//! Dense linear algebra, SPD solvers, finite differences and the seeded RNG
//! stream shared by the rest of the crate. Everything is `f64`.

mod matrix;
mod rng;
mod solve;

pub use matrix::Matrix;
pub use rng::RngStream;
pub use solve::{cg_solve, cholesky_solve, finite_diff_grad, CgOptions, CgOutcome};

/// Inner product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &mut [f64]) {
    for v in x {
        *v *= alpha;
    }
}

/// `‖a − b‖ / ‖b‖`, falling back to the absolute difference when `b` is zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let denom = norm(b);
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}
