//! Central-difference gradient checking used by the verification suite and
//! by the per-loss unit tests.

/// Default perturbation for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&probe);
        probe[i] = x[i] - eps;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Worst relative error between an analytic and a numeric gradient.
///
/// Each pair is compared as `|a - n| / max(|a|, |n|, 1e-8)` so that
/// coordinates where both gradients vanish do not blow up the ratio.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
