//! Finite-difference gradient oracle.
//!
//! Central differences around each coordinate, rebuilding the computation
//! from scratch via the supplied closure. Deliberately knows nothing about
//! the tape so it can serve as an independent check of the backward pass.

/// Central-difference gradient of `f` at `x` with step `h` per coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradient vectors.
///
/// The denominator is floored at `abs_floor` so coordinates where both
/// gradients are tiny compare on an absolute scale instead of blowing up.
pub fn max_rel_error(a: &[f64], b: &[f64], abs_floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let denom = x.abs().max(y.abs()).max(abs_floor);
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
