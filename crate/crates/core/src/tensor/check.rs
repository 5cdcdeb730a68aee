//! Central finite differences, the oracle for every backward rule.

use super::Tensor;

/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)` for every element `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Elementwise `|a − b| / max(|a|, |b|, floor)`, maximised over the tensor.
///
/// `floor` keeps near-zero gradients from turning rounding noise into large
/// relative errors.
pub fn max_relative_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "compared tensors differ in shape");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
