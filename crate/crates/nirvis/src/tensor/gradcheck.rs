//! Finite-difference gradient checking.
//!
//! The numerical side evaluates a loss as a pure function of a flattened
//! input vector with symmetric central differences; the analytic side comes
//! from `backward()`. Checks are meant to run in `f64`, where the central
//! difference at step `h ~ 1e-5` carries an error around `1e-10` for
//! O(1)-scaled problems.

/// Central-difference gradient of `f` at `x0` with step `h` per coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut x = x0.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Largest elementwise relative error between two gradients:
/// `max_i |a_i - n_i| / max(floor, |a_i| + |n_i|)`.
/// The floor keeps near-zero gradients from turning roundoff into spurious
/// large ratios.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert!(
        analytic.len() == numeric.len(),
        "gradient length mismatch: {} vs {}",
        analytic.len(),
        numeric.len()
    );
    assert!(floor > 0.0, "floor must be positive");
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let denom = (a.abs() + n.abs()).max(floor);
        let err = (a - n).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
