//! Finite-difference reference gradients.
//!
//! These helpers only evaluate the function being checked; they never look at
//! the tape, so they serve as an independent oracle for [`crate::Tape::backward`].

use ndarray::Zip;

use crate::Tensor;

/// Central-difference gradient of a scalar function at `x`.
pub fn central_difference(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    let mut probe = x.as_standard_layout().into_owned();
    let mut grad = Tensor::zeros(probe.raw_dim());
    for i in 0..probe.len() {
        let orig = probe.as_slice().expect("standard layout")[i];
        probe.as_slice_mut().expect("standard layout")[i] = orig + eps;
        let plus = f(&probe);
        probe.as_slice_mut().expect("standard layout")[i] = orig - eps;
        let minus = f(&probe);
        probe.as_slice_mut().expect("standard layout")[i] = orig;
        grad.as_slice_mut().expect("fresh array")[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over all elements, with the
/// floor keeping near-zero entries from dominating.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "gradient shapes differ");
    let scale = a.iter().chain(b.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-3).max(1e-8);
    let mut worst = 0.0f64;
    Zip::from(a).and(b).for_each(|&x, &y| {
        let denom = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / denom);
    });
    worst
}
