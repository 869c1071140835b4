//! Finite-difference reference gradients.
//!
//! These only ever evaluate the function, never its graph, so they serve as an
//! independent check on the analytic backward rules.

use crate::Tensor;

/// Central-difference estimate of `d f / d point`, one coordinate at a time.
pub fn central_difference(point: &Tensor, eps: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = point.clone();
    let mut out = Tensor::zeros(point.raw_dim());
    let coords: Vec<_> = point.indexed_iter().map(|(i, _)| i).collect();
    for idx in coords {
        let orig = probe[&idx];
        probe[&idx] = orig + eps;
        let up = f(&probe);
        probe[&idx] = orig - eps;
        let down = f(&probe);
        probe[&idx] = orig;
        out[&idx] = (up - down) / (2.0 * eps);
    }
    out
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute difference norm when both are ~0.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
