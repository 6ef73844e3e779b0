/// `|a − b| / max(|a|, |b|, 1e-8)`; two (near-)zero values compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the reverse-mode gradient returned by `f` against central
/// differences with step `eps` and returns the largest relative error over
/// all coordinates.
///
/// `f` maps a point to `(value, gradient)`.
pub fn grad_check<F>(f: F, point: &[f64], eps: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(analytic.len(), point.len(), "gradient length");
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + eps;
        let (up, _) = f(&probe);
        probe[i] = point[i] - eps;
        let (down, _) = f(&probe);
        probe[i] = point[i];
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}
