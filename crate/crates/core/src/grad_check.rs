//! Central-finite-difference gradient checking.
//!
//! Every loss in this crate is validated against `(f(x+h) - f(x-h)) / 2h`;
//! the helpers here are public so integration and acceptance suites can run
//! the same checks against the real losses.

use ndarray::ArrayD;

/// Numerical gradient of a scalar function at `x` via central differences.
pub fn finite_difference(
    x: &ArrayD<f64>,
    h: f64,
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    let n = x.len();
    for i in 0..n {
        let orig = probe.as_slice_mut().unwrap()[i];
        probe.as_slice_mut().unwrap()[i] = orig + h;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - h;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative error between two gradients, `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
