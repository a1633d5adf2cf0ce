use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, IxDyn};

use crate::Tensor;

/// Geometry of a 2-D convolution over `[batch, channels, height, width]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2dSpec {
    /// Stride 1 with padding chosen so that output size equals input size
    /// for an odd kernel of side `kernel`.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be [B, C, H, W], got {x:?}");
        assert_eq!(w.len(), 4, "conv2d kernel must be [O, C, kh, kw], got {w:?}");
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?}, kernel {w:?}");
        let span_h = spec.dilation * (w[2] - 1) + 1;
        let span_w = spec.dilation * (w[3] - 1) + 1;
        assert!(
            x[2] + 2 * spec.padding >= span_h && x[3] + 2 * spec.padding >= span_w,
            "conv2d kernel larger than padded input"
        );
        Self {
            batch: x[0],
            channels: x[1],
            height: x[2],
            width: x[3],
            kh: w[2],
            kw: w[3],
            out_h: spec.output_len(x[2], w[2]),
            out_w: spec.output_len(x[3], w[3]),
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Source offset for (row tap, output position) or `None` in the padding.
    #[inline]
    fn source(&self, spec: Conv2dSpec, i: usize, j: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * spec.stride + i * spec.dilation) as isize - spec.padding as isize;
        let x = (ox * spec.stride + j * spec.dilation) as isize - spec.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

fn im2col(x: &[f64], g: &Geometry, spec: Conv2dSpec) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((g.rows(), g.cols()));
    let plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let buf = cols.as_slice_mut().expect("fresh array is contiguous");
    let ncols = g.cols();
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut buf[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let dst_b = &mut dst[b * out_plane..(b + 1) * out_plane];
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            if let Some((y, xx)) = g.source(spec, i, j, oy, ox) {
                                dst_b[oy * g.out_w + ox] = src[y * g.width + xx];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, g: &Geometry, spec: Conv2dSpec) -> Tensor {
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[g.batch, g.channels, g.height, g.width]));
    let plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    let ncols = g.cols();
    let src = cols.as_slice().expect("col buffer is contiguous");
    let dst = out.as_slice_mut().expect("fresh array is contiguous");
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &src[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst_b = &mut dst[(b * g.channels + c) * plane..(b * g.channels + c + 1) * plane];
                    let src_b = &src_row[b * out_plane..(b + 1) * out_plane];
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            if let Some((y, xx)) = g.source(spec, i, j, oy, ox) {
                                dst_b[y * g.width + xx] += src_b[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn kernel_matrix(w: &Tensor) -> ArrayView2<'_, f64> {
    let s = w.shape();
    w.view()
        .into_shape_with_order((s[0], s[1] * s[2] * s[3]))
        .expect("kernel is contiguous")
        .into_dimensionality()
        .expect("rank 2")
}

/// `[O, B*Ho*Wo]` matrix to `[B, O, Ho, Wo]` tensor.
fn unfold_output(mat: Array2<f64>, g: &Geometry, out_ch: usize) -> Tensor {
    mat.into_shape_with_order((out_ch, g.batch, g.out_h, g.out_w))
        .expect("contiguous product")
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_dyn()
}

/// `[B, O, Ho, Wo]` gradient to `[O, B*Ho*Wo]` matrix.
fn fold_output(grad: &Tensor, g: &Geometry, out_ch: usize) -> Array2<f64> {
    grad.view()
        .permuted_axes(IxDyn(&[1, 0, 2, 3]))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((out_ch, g.cols()))
        .expect("standard layout")
}

/// Cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`, no bias.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Tensor {
    let g = Geometry::new(x.shape(), w.shape(), spec);
    let x = x.as_standard_layout();
    let cols = im2col(x.as_slice().expect("standard layout"), &g, spec);
    let out_ch = w.shape()[0];
    let w = w.as_standard_layout();
    let mut out = Array2::<f64>::zeros((out_ch, g.cols()));
    general_mat_mul(1.0, &kernel_matrix(&w.to_owned()), &cols, 0.0, &mut out);
    unfold_output(out, &g, out_ch)
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    spec: Conv2dSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let g = Geometry::new(x.shape(), w.shape(), spec);
    let out_ch = w.shape()[0];
    let grad_mat = fold_output(grad, &g, out_ch);
    let w_std = w.as_standard_layout().to_owned();
    let w_mat = kernel_matrix(&w_std);

    let gw = need_w.then(|| {
        let x = x.as_standard_layout();
        let cols = im2col(x.as_slice().expect("standard layout"), &g, spec);
        let mut gw = Array2::<f64>::zeros((out_ch, g.rows()));
        general_mat_mul(1.0, &grad_mat, &cols.t(), 0.0, &mut gw);
        gw.into_shape_with_order(w.shape().to_vec())
            .expect("kernel shape")
            .into_dyn()
    });
    let gx = need_x.then(|| {
        let mut gcols = Array2::<f64>::zeros((g.rows(), g.cols()));
        general_mat_mul(1.0, &w_mat.t(), &grad_mat, 0.0, &mut gcols);
        col2im(&gcols, &g, spec)
    });
    (gx, gw)
}
