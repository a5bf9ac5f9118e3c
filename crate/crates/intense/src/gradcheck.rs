//! Central finite differences for certifying gradients.

/// Central-difference gradient of `f` at `x` with step `h` per coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let fp = f(&point);
        point[i] = orig - h;
        let fm = f(&point);
        point[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Worst relative disagreement between two gradient vectors. Each
/// coordinate is compared as `|a - b| / max(|a|, |b|, floor)` so that
/// near-zero entries are judged on the absolute scale of `floor`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        let g = central_difference(f, &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert!(max_relative_error(&[0.0, 1.0], &[1e-9, 1.0], 1e-6) < 2e-3);
        assert!(max_relative_error(&[1.0], &[2.0], 1e-6) >= 0.5);
    }
}
