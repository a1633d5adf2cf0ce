use std::cell::{Ref, RefCell};
use std::fmt;

use ndarray::{concatenate, linalg::general_mat_mul, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn, Slice, Zip};

use crate::conv::{conv2d_backward, conv2d_forward, Conv2dSpec};
use crate::reduce::{unbroadcast, AxisRows};
use crate::{GradError, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Abs(usize),
    Square(usize),
    SoftmaxLast(usize),
    LayerNormLast(usize, f64),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Narrow { x: usize, axis: usize, start: usize },
    SumAll(usize),
    MeanAll(usize),
    SumAxes(usize),
    MeanAxes(usize),
    MaxAxes(usize, Vec<usize>),
    GatherRows { table: usize, rows: Vec<usize> },
    Conv2d { x: usize, w: usize, spec: Conv2dSpec },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => vec![*a, *b],
            Neg(a) | Scale(a, _) | AddScalar(a) | Sigmoid(a) | Tanh(a) | Relu(a) | Abs(a) | Square(a)
            | SoftmaxLast(a) | LayerNormLast(a, _) | Permute(a, _) | Reshape(a) | SumAll(a) | MeanAll(a)
            | SumAxes(a) | MeanAxes(a) | MaxAxes(a, _) => vec![*a],
            Concat(xs, _) => xs.clone(),
            Narrow { x, .. } => vec![*x],
            GatherRows { table, .. } => vec![*table],
            Conv2d { x, w, .. } => vec![*x, *w],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations on [`Var`]s for a single forward/backward pass.
///
/// A tape is cheap to create; build a fresh one per mini-batch.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when the output does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(IxDyn(&var.shape())))
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_raw(value, op, requires_grad)
    }

    fn with_values<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    /// Concatenates along `axis`. All inputs must agree on every other axis.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let value = self.with_values(|n| {
            let views: Vec<_> = parts.iter().map(|v| n[v.id].value.view()).collect();
            concatenate(Axis(axis), &views).expect("concat shapes agree off-axis")
        });
        self.push(value, Op::Concat(parts.iter().map(|v| v.id).collect(), axis))
    }

    /// Selects rows of a `[R, d]` table, producing `[rows.len(), d]`.
    pub fn gather_rows<'t>(&'t self, table: Var<'t>, rows: &[usize]) -> Var<'t> {
        let value = self.with_values(|n| {
            let t = &n[table.id].value;
            assert_eq!(t.ndim(), 2, "gather_rows expects a rank-2 table");
            let d = t.shape()[1];
            let mut out = ArrayD::zeros(IxDyn(&[rows.len(), d]));
            for (i, &r) in rows.iter().enumerate() {
                assert!(r < t.shape()[0], "row {r} out of range for table {:?}", t.shape());
                out.index_axis_mut(Axis(0), i).assign(&t.index_axis(Axis(0), r));
            }
            out
        });
        self.push(
            value,
            Op::GatherRows {
                table: table.id,
                rows: rows.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients, GradError> {
        let shape = output.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(GradError::NonScalarOutput(shape));
        }
        self.backward_seeded(output, ArrayD::ones(IxDyn(&shape)))
    }

    /// Reverse pass from an arbitrary output with an explicit upstream gradient.
    pub fn backward_seeded(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients, GradError> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape().to_vec();
        if seed.shape() != out_shape.as_slice() {
            return Err(GradError::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_shape,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(seed);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, pg) in backward_op(&nodes, node, g) {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn mat2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("rank-2 operand")
}

fn batch2(t: &Tensor, k: usize) -> ArrayView2<'_, f64> {
    t.index_axis(Axis(0), k).into_dimensionality::<Ix2>().expect("rank-3 operand")
}

fn batch2_mut(t: &mut Tensor, k: usize) -> ArrayViewMut2<'_, f64> {
    t.index_axis_mut(Axis(0), k).into_dimensionality::<Ix2>().expect("rank-3 operand")
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Tensor {
    match (a.ndim(), b.ndim()) {
        (2, 2) => mat2(a).dot(&mat2(b)).into_dyn(),
        (3, 3) => {
            let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            assert_eq!(b.shape()[0], batch, "batched matmul batch mismatch");
            assert_eq!(b.shape()[1], k, "matmul inner dimension mismatch {:?} x {:?}", a.shape(), b.shape());
            let n = b.shape()[2];
            let mut out = ArrayD::zeros(IxDyn(&[batch, m, n]));
            for i in 0..batch {
                general_mat_mul(1.0, &batch2(a, i), &batch2(b, i), 0.0, &mut batch2_mut(&mut out, i));
            }
            out
        }
        (3, 2) => {
            let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            assert_eq!(b.shape()[0], k, "matmul inner dimension mismatch {:?} x {:?}", a.shape(), b.shape());
            let a2 = a.as_standard_layout();
            let a2 = a2.view().into_shape_with_order((batch * m, k)).expect("standard layout");
            let out = a2.dot(&mat2(b));
            out.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&[batch, m, b.shape()[1]])).expect("contiguous")
        }
        (2, 3) => {
            let batch = b.shape()[0];
            assert_eq!(a.shape()[1], b.shape()[1], "matmul inner dimension mismatch {:?} x {:?}", a.shape(), b.shape());
            let (m, n) = (a.shape()[0], b.shape()[2]);
            let mut out = ArrayD::zeros(IxDyn(&[batch, m, n]));
            let a2 = mat2(a);
            for i in 0..batch {
                general_mat_mul(1.0, &a2, &batch2(b, i), 0.0, &mut batch2_mut(&mut out, i));
            }
            out
        }
        (x, y) => panic!("matmul unsupported for ranks {x} and {y}"),
    }
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    match (a.ndim(), b.ndim()) {
        (2, 2) => {
            let g2 = mat2(g);
            (g2.dot(&mat2(b).t()).into_dyn(), mat2(a).t().dot(&g2).into_dyn())
        }
        (3, 3) => {
            let mut ga = ArrayD::zeros(a.raw_dim());
            let mut gb = ArrayD::zeros(b.raw_dim());
            for i in 0..a.shape()[0] {
                let gi = batch2(g, i);
                general_mat_mul(1.0, &gi, &batch2(b, i).t(), 0.0, &mut batch2_mut(&mut ga, i));
                general_mat_mul(1.0, &batch2(a, i).t(), &gi, 0.0, &mut batch2_mut(&mut gb, i));
            }
            (ga, gb)
        }
        (3, 2) => {
            let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[1];
            let a_std = a.as_standard_layout();
            let a2 = a_std.view().into_shape_with_order((batch * m, k)).expect("standard layout");
            let g_std = g.as_standard_layout();
            let g2 = g_std.view().into_shape_with_order((batch * m, n)).expect("standard layout");
            let ga = g2.dot(&mat2(b).t()).as_standard_layout().into_owned().into_shape_with_order(IxDyn(&[batch, m, k])).expect("contiguous");
            (ga, a2.t().dot(&g2).into_dyn())
        }
        (2, 3) => {
            let a2 = mat2(a);
            let mut ga = Array2::<f64>::zeros(a2.raw_dim());
            let mut gb = ArrayD::zeros(b.raw_dim());
            for i in 0..b.shape()[0] {
                let gi = batch2(g, i);
                general_mat_mul(1.0, &gi, &batch2(b, i).t(), 1.0, &mut ga);
                general_mat_mul(1.0, &a2.t(), &gi, 0.0, &mut batch2_mut(&mut gb, i));
            }
            (ga.into_dyn(), gb)
        }
        _ => unreachable!("forward rejected these ranks"),
    }
}

fn softmax_last(x: &Tensor) -> Tensor {
    let mut out = x.as_standard_layout().into_owned();
    for mut row in out.lanes_mut(Axis(x.ndim() - 1)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn layer_norm_last(x: &Tensor, eps: f64) -> Tensor {
    let mut out = x.as_standard_layout().into_owned();
    for mut row in out.lanes_mut(Axis(x.ndim() - 1)) {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn layer_norm_last_backward(x: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let axis = Axis(x.ndim() - 1);
    let mut out = ArrayD::zeros(x.raw_dim());
    Zip::from(out.lanes_mut(axis))
        .and(x.lanes(axis))
        .and(g.lanes(axis))
        .for_each(|mut o, xr, gr| {
            let n = xr.len() as f64;
            let mean = xr.sum() / n;
            let var = xr.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            let g_mean = gr.sum() / n;
            let gx_mean = xr.iter().zip(gr.iter()).map(|(&v, &gv)| (v - mean) * inv * gv).sum::<f64>() / n;
            for ((o, &v), &gv) in o.iter_mut().zip(xr.iter()).zip(gr.iter()) {
                let xhat = (v - mean) * inv;
                *o = inv * (gv - g_mean - xhat * gx_mean);
            }
        });
    out
}

fn backward_op(nodes: &[Node], node: &Node, g: Tensor) -> Vec<(usize, Tensor)> {
    let val = |id: usize| &nodes[id].value;
    let shape = |id: usize| nodes[id].value.shape().to_vec();
    let out = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, unbroadcast(g.clone(), &shape(*a))), (*b, unbroadcast(g, &shape(*b)))],
        Op::Sub(a, b) => vec![(*a, unbroadcast(g.clone(), &shape(*a))), (*b, -unbroadcast(g, &shape(*b)))],
        Op::Mul(a, b) => {
            let ga = unbroadcast(&g * val(*b), &shape(*a));
            let gb = unbroadcast(&g * val(*a), &shape(*b));
            vec![(*a, ga), (*b, gb)]
        }
        Op::Neg(a) => vec![(*a, -g)],
        Op::Scale(a, c) => vec![(*a, g * *c)],
        Op::AddScalar(a) => vec![(*a, g)],
        Op::Sigmoid(a) => vec![(*a, g * &out.mapv(|y| y * (1.0 - y)))],
        Op::Tanh(a) => vec![(*a, g * &out.mapv(|y| 1.0 - y * y))],
        Op::Relu(a) => vec![(*a, g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))],
        Op::Abs(a) => vec![(*a, g * &val(*a).mapv(f64::signum).mapv(|s| if s.is_nan() { 0.0 } else { s }))],
        Op::Square(a) => vec![(*a, g * &val(*a).mapv(|x| 2.0 * x))],
        Op::SoftmaxLast(a) => {
            let axis = Axis(out.ndim() - 1);
            let dot = (&g * out).sum_axis(axis).insert_axis(axis);
            vec![(*a, out * &(g - &dot))]
        }
        Op::LayerNormLast(a, eps) => vec![(*a, layer_norm_last_backward(val(*a), &g, *eps))],
        Op::MatMul(a, b) => {
            let (ga, gb) = matmul_backward(val(*a), val(*b), &g);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Permute(a, perm) => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            vec![(*a, g.permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned())]
        }
        Op::Reshape(a) => {
            let g = g.as_standard_layout().into_owned();
            vec![(*a, g.into_shape_with_order(IxDyn(&shape(*a))).expect("same element count"))]
        }
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            parts
                .iter()
                .map(|&p| {
                    let len = nodes[p].value.shape()[*axis];
                    let piece = g
                        .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                        .to_owned();
                    offset += len;
                    (p, piece)
                })
                .collect()
        }
        Op::Narrow { x, axis, start } => {
            let mut full = ArrayD::zeros(IxDyn(&shape(*x)));
            let len = g.shape()[*axis];
            full.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(&g);
            vec![(*x, full)]
        }
        Op::SumAll(a) => {
            let s = g.iter().next().copied().unwrap_or(0.0);
            vec![(*a, ArrayD::from_elem(IxDyn(&shape(*a)), s))]
        }
        Op::MeanAll(a) => {
            let n = val(*a).len() as f64;
            let s = g.iter().next().copied().unwrap_or(0.0) / n;
            vec![(*a, ArrayD::from_elem(IxDyn(&shape(*a)), s))]
        }
        Op::SumAxes(a) | Op::MeanAxes(a) => {
            let target = shape(*a);
            let scale = if let Op::MeanAxes(..) = node.op {
                g.len() as f64 / val(*a).len() as f64
            } else {
                1.0
            };
            let full = g.broadcast(IxDyn(&target)).expect("keepdims shape broadcasts").to_owned();
            vec![(*a, full * scale)]
        }
        Op::MaxAxes(a, axes) => {
            let x = val(*a);
            let layout = AxisRows::new(x.shape(), axes);
            let rows = layout.rows(x);
            let g_flat: Vec<f64> = g.as_standard_layout().iter().copied().collect();
            let mut grows = Array2::<f64>::zeros(rows.raw_dim());
            for (r, row) in rows.outer_iter().enumerate() {
                let arg = argmax(row.as_slice().expect("standard rows"));
                grows[[r, arg]] = g_flat[r];
            }
            vec![(*a, layout.unrows(grows))]
        }
        Op::GatherRows { table, rows } => {
            let mut gt = ArrayD::zeros(IxDyn(&shape(*table)));
            for (i, &r) in rows.iter().enumerate() {
                let mut dst = gt.index_axis_mut(Axis(0), r);
                dst += &g.index_axis(Axis(0), i);
            }
            vec![(*table, gt)]
        }
        Op::Conv2d { x, w, spec } => {
            let need_x = nodes[*x].requires_grad;
            let need_w = nodes[*w].requires_grad;
            let (gx, gw) = conv2d_backward(val(*x), val(*w), &g, *spec, need_x, need_w);
            gx.map(|t| (*x, t)).into_iter().chain(gw.map(|t| (*w, t))).collect()
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow of the recorded value. Drop it before recording new operations.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on tensor of shape {:?}", v.shape());
        v.iter().next().copied().unwrap_or(0.0)
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        self.tape.push(value, op)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let value = {
            let n = self.tape.nodes.borrow();
            f(&n[self.id].value, &n[other.id].value)
        };
        self.tape.push(value, op)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |a| -a)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |a| a + c)
    }

    /// `1 - x`, the complement used by gated recurrences.
    pub fn one_minus(self) -> Var<'t> {
        self.neg().add_scalar(1.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |a| a.mapv(|x| 1.0 / (1.0 + (-x).exp())))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| a.mapv(f64::tanh))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.mapv(|x| x.max(0.0)))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), |a| a.mapv(f64::abs))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.mapv(|x| x * x))
    }

    /// Max-shifted softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        self.unary(Op::SoftmaxLast(self.id), softmax_last)
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine terms).
    pub fn layer_norm_last(self, eps: f64) -> Var<'t> {
        self.unary(Op::LayerNormLast(self.id, eps), |a| layer_norm_last(a, eps))
    }

    /// Matrix product. Supports `[M,K]x[K,N]`, `[B,M,K]x[B,K,N]`,
    /// `[B,M,K]x[K,N]` and `[M,K]x[B,K,N]` (shared operand broadcast over the batch).
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.id, other.id), matmul_forward)
    }

    pub fn permute(self, perm: &[usize]) -> Var<'t> {
        self.unary(Op::Permute(self.id, perm.to_vec()), |a| {
            a.view().permuted_axes(IxDyn(perm)).as_standard_layout().into_owned()
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Var<'t> {
        let nd = self.value().ndim();
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        self.unary(Op::Reshape(self.id), |a| {
            a.as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(shape))
                .unwrap_or_else(|_| panic!("cannot reshape {:?} to {shape:?}", a.shape()))
        })
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        self.unary(
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            |a| a.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned(),
        )
    }

    /// Removes `axis` by selecting `index` along it.
    pub fn select(self, axis: usize, index: usize) -> Var<'t> {
        let mut shape = self.shape();
        shape.remove(axis);
        self.narrow(axis, index, 1).reshape(&shape)
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |a| ArrayD::from_elem(IxDyn(&[]), a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::MeanAll(self.id), |a| {
            ArrayD::from_elem(IxDyn(&[]), a.sum() / a.len() as f64)
        })
    }

    /// Sum over `axes`, keeping them as unit axes.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'t> {
        self.unary(Op::SumAxes(self.id), |a| {
            let layout = AxisRows::new(a.shape(), axes);
            let rows = layout.rows(a);
            rows.sum_axis(Axis(1))
                .into_shape_with_order(IxDyn(&layout.keep_shape))
                .expect("row count matches kept axes")
        })
    }

    /// Mean over `axes`, keeping them as unit axes.
    pub fn mean_axes(self, axes: &[usize]) -> Var<'t> {
        self.unary(Op::MeanAxes(self.id), |a| {
            let layout = AxisRows::new(a.shape(), axes);
            let rows = layout.rows(a);
            let n = layout.inner as f64;
            (rows.sum_axis(Axis(1)) / n)
                .into_shape_with_order(IxDyn(&layout.keep_shape))
                .expect("row count matches kept axes")
        })
    }

    /// Max over `axes`, keeping them as unit axes. The gradient goes to the
    /// first maximal element.
    pub fn max_axes(self, axes: &[usize]) -> Var<'t> {
        self.unary(Op::MaxAxes(self.id, axes.to_vec()), |a| {
            let layout = AxisRows::new(a.shape(), axes);
            let rows = layout.rows(a);
            rows.map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |m, &v| m.max(v)))
                .into_shape_with_order(IxDyn(&layout.keep_shape))
                .expect("row count matches kept axes")
        })
    }

    /// 2-D cross-correlation of `[B,C,H,W]` input with a `[O,C,kh,kw]` kernel.
    pub fn conv2d(self, kernel: Var<'t>, spec: Conv2dSpec) -> Var<'t> {
        self.binary(
            kernel,
            Op::Conv2d {
                x: self.id,
                w: kernel.id,
                spec,
            },
            |x, w| conv2d_forward(x, w, spec),
        )
    }

    /// Applies `[O,C,kh,kw]` kernel and `[O]` bias.
    pub fn conv2d_bias(self, kernel: Var<'t>, bias: Var<'t>, spec: Conv2dSpec) -> Var<'t> {
        let out_ch = bias.shape()[0];
        self.conv2d(kernel, spec).add(bias.reshape(&[1, out_ch, 1, 1]))
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $inner:ident) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::$inner(self, rhs)
            }
        }
    };
}

impl_binop!(Add, add, add);
impl_binop!(Sub, sub, sub);
impl_binop!(Mul, mul, mul);
