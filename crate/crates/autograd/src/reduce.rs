use ndarray::{Array2, Axis, IxDyn};

use crate::Tensor;

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn unbroadcast(grad: Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &len) in shape.iter().enumerate() {
        if len == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    debug_assert_eq!(g.shape(), shape);
    g
}

/// Layout used to reduce over an arbitrary set of axes: the kept axes are
/// moved first, the reduced axes last, and the result flattened to
/// `[outer, inner]` rows.
pub(crate) struct AxisRows {
    perm: Vec<usize>,
    permuted_shape: Vec<usize>,
    pub(crate) keep_shape: Vec<usize>,
    pub(crate) inner: usize,
}

impl AxisRows {
    pub(crate) fn new(shape: &[usize], axes: &[usize]) -> Self {
        for &a in axes {
            assert!(a < shape.len(), "reduction axis {a} out of range for {shape:?}");
        }
        let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
        let mut reduced: Vec<usize> = axes.to_vec();
        reduced.sort_unstable();
        reduced.dedup();
        let perm: Vec<usize> = kept.iter().chain(reduced.iter()).copied().collect();
        let permuted_shape = perm.iter().map(|&a| shape[a]).collect();
        let keep_shape = shape
            .iter()
            .enumerate()
            .map(|(a, &n)| if reduced.contains(&a) { 1 } else { n })
            .collect();
        let inner = reduced.iter().map(|&a| shape[a]).product();
        Self {
            perm,
            permuted_shape,
            keep_shape,
            inner,
        }
    }

    pub(crate) fn rows(&self, x: &Tensor) -> Array2<f64> {
        let outer = x.len() / self.inner.max(1);
        x.view()
            .permuted_axes(IxDyn(&self.perm))
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((outer, self.inner))
            .expect("standard layout")
    }

    /// Inverse of [`AxisRows::rows`].
    pub(crate) fn unrows(&self, rows: Array2<f64>) -> Tensor {
        let mut inverse = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inverse[p] = i;
        }
        rows.into_shape_with_order(IxDyn(&self.permuted_shape))
            .expect("row count matches")
            .permuted_axes(IxDyn(&inverse))
            .as_standard_layout()
            .into_owned()
    }
}
