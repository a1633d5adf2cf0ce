//! Cross-attention from numerical features (plus an optional learnable
//! query) onto vision tokens, with residual layer normalization.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix2, Ix3};
use vnnet_autograd::{Tape, Var};

use crate::error::{Error, Result};
use crate::numerical_encoder::NumericalFeatures;
use crate::params::{ParamBuilder, ParamId};
use crate::vision_encoder::VisionFeatures;

pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<P> {
    /// `Z_L : [L_n·N, F]`; absent in single-query mode.
    pub learned_query: Option<P>,
    /// Rows of `W_Q` acting on the numerical half of the query, `[F, F]`.
    pub w_q_numeric: P,
    /// Rows of `W_Q` acting on `Z_L`, `[F, F]`.
    pub w_q_learned: Option<P>,
    /// `[C', F]`
    pub w_k: P,
    /// `[C', F]`
    pub w_v: P,
    pub ln_scale: P,
    pub ln_shift: P,
}

impl<P> FusionParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> FusionParams<Q> {
        FusionParams {
            learned_query: self.learned_query.as_ref().map(&mut f),
            w_q_numeric: f(&self.w_q_numeric),
            w_q_learned: self.w_q_learned.as_ref().map(&mut f),
            w_k: f(&self.w_k),
            w_v: f(&self.w_v),
            ln_scale: f(&self.ln_scale),
            ln_shift: f(&self.ln_shift),
        }
    }

    pub fn is_double(&self) -> bool {
        self.learned_query.is_some()
    }
}

/// `rows` is `L_n·N`, `vision` is `C'`.
pub fn init_fusion(b: &mut ParamBuilder<'_>, rows: usize, hidden: usize, vision: usize, double: bool) -> FusionParams<ParamId> {
    let query_in = if double { 2 * hidden } else { hidden };
    FusionParams {
        learned_query: double.then(|| b.uniform("learned_query", &[rows, hidden], hidden)),
        w_q_numeric: b.uniform("w_q_numeric", &[hidden, hidden], query_in),
        w_q_learned: double.then(|| b.uniform("w_q_learned", &[hidden, hidden], query_in)),
        w_k: b.uniform("w_k", &[vision, hidden], vision),
        w_v: b.uniform("w_v", &[vision, hidden], vision),
        ln_scale: b.constant("ln_scale", &[hidden], 1.0),
        ln_shift: b.constant("ln_shift", &[hidden], 0.0),
    }
}

/// Output of the fused attention together with its weights.
pub struct Attended<'t> {
    /// `[B, L_n, N, F]`
    pub output: Var<'t>,
    /// `[B, L_n·N, H'·W']`
    pub weights: Var<'t>,
}

/// `z_n : [B, L_n, N, F]`, `z_v : [B, C', H', W']`.
pub fn dqam<'t>(z_n: Var<'t>, z_v: Var<'t>, params: &FusionParams<Var<'t>>) -> Result<Attended<'t>> {
    let ns = z_n.shape();
    let vs = z_v.shape();
    let (b, l, n, f) = (ns[0], ns[1], ns[2], ns[3]);
    let tokens = vs[2] * vs[3];
    if tokens == 0 {
        return Err(Error::EmptyVision);
    }
    let rows = z_n.reshape(&[b, l * n, f]);
    let vision = z_v.reshape(&[b, vs[1], tokens]).transpose_last();

    let mut query = rows.matmul(params.w_q_numeric);
    if let (Some(z_l), Some(w)) = (params.learned_query, params.w_q_learned) {
        query = query.add(z_l.matmul(w));
    }
    let keys = vision.matmul(params.w_k);
    let values = vision.matmul(params.w_v);
    let weights = query
        .matmul(keys.transpose_last())
        .scale(1.0 / (f as f64).sqrt())
        .softmax_last();
    let attended = weights.matmul(values);
    let normed = rows.add(attended).layer_norm_last(LAYER_NORM_EPS);
    let output = normed.mul(params.ln_scale).add(params.ln_shift).reshape(&[b, l, n, f]);
    Ok(Attended { output, weights })
}

/// Fused features of one sample, `L_n × N × F`, and the `L_n·N × H'·W'`
/// attention weights.
pub fn dqam_with_weights(
    z_n: &NumericalFeatures,
    z_v: &VisionFeatures,
    params: &FusionParams<ArrayD<f64>>,
) -> Result<(Array3<f64>, Array2<f64>)> {
    let (l, n, f) = z_n.values.dim();
    let (h, w, c) = z_v.values.dim();
    if h * w == 0 {
        return Err(Error::EmptyVision);
    }
    if params.w_k.shape()[0] != c || params.w_q_numeric.shape()[0] != f {
        return Err(Error::Config(format!(
            "fusion built for F={} and C'={}, got F={f} and C'={c}",
            params.w_q_numeric.shape()[0],
            params.w_k.shape()[0]
        )));
    }
    if let Some(q) = &params.learned_query {
        if q.shape()[0] != l * n {
            return Err(Error::Config(format!("learned query has {} rows, need {}", q.shape()[0], l * n)));
        }
    }
    let tape = Tape::new();
    let p = params.map(|a| tape.constant(a.clone()));
    let zn = tape.constant(z_n.values.clone().insert_axis(Axis(0)).into_dyn());
    let zv = tape.constant(
        z_v.values
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned()
            .insert_axis(Axis(0))
            .into_dyn(),
    );
    let out = dqam(zn, zv, &p)?;
    let o = out.output.to_tensor().index_axis_move(Axis(0), 0).into_dimensionality::<Ix3>().expect("rank 3");
    let a = out.weights.to_tensor().index_axis_move(Axis(0), 0).into_dimensionality::<Ix2>().expect("rank 2");
    Ok((o, a))
}

pub fn dqam_apply(z_n: &NumericalFeatures, z_v: &VisionFeatures, params: &FusionParams<ArrayD<f64>>) -> Result<Array3<f64>> {
    dqam_with_weights(z_n, z_v, params).map(|(o, _)| o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Initializer, ParamStore};
    use ndarray::Array;

    fn params(rows: usize, f: usize, c: usize, double: bool, seed: u64) -> FusionParams<ArrayD<f64>> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let ids = init_fusion(&mut ParamBuilder::new(&mut store, &mut init), rows, f, c, double);
        ids.map(|id| store.get(*id).clone())
    }

    fn features(l: usize, n: usize, f: usize) -> NumericalFeatures {
        NumericalFeatures {
            values: Array::from_shape_fn((l, n, f), |(a, b, c)| ((a * 11 + b * 5 + c) as f64 * 0.29).sin()),
        }
    }

    fn vision(h: usize, w: usize, c: usize, phase: f64) -> VisionFeatures {
        VisionFeatures {
            values: Array::from_shape_fn((h, w, c), |(a, b, k)| ((a * 3 + b * 7 + k) as f64 * 0.53 + phase).cos()),
        }
    }

    #[test]
    fn single_token_attends_with_weight_one() {
        let p = params(6, 4, 3, true, 1);
        let zn = features(2, 3, 4);
        let zv = vision(1, 1, 3, 0.0);
        let (out, a) = dqam_with_weights(&zn, &zv, &p).unwrap();
        assert!(a.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let token = zv.values.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned();
        let wv = p.w_v.view().into_dimensionality::<Ix2>().unwrap();
        let att = token.dot(&wv);
        for (i, row) in zn.values.view().into_shape_with_order((6, 4)).unwrap().outer_iter().enumerate() {
            let x = &row + &att;
            let mean = x.mean().unwrap();
            let var = x.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            let expected = x.mapv(|v| (v - mean) / (var + LAYER_NORM_EPS).sqrt());
            let got = out.view().into_shape_with_order((6, 4)).unwrap().row(i).to_owned();
            for (g, e) in got.iter().zip(expected.iter()) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_are_normalized_and_weights_stochastic() {
        let p = params(6, 4, 3, true, 2);
        let (out, a) = dqam_with_weights(&features(2, 3, 4), &vision(3, 2, 3, 0.4), &p).unwrap();
        for row in a.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        for row in out.view().into_shape_with_order((6, 4)).unwrap().outer_iter() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
            assert!(mean.abs() < 1e-7);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn token_permutation_invariance() {
        let p = params(6, 4, 3, true, 3);
        let zv = vision(2, 3, 3, 0.1);
        let mut swapped = zv.clone();
        // swap tokens (0,0) and (1,2)
        for k in 0..3 {
            swapped.values[[0, 0, k]] = zv.values[[1, 2, k]];
            swapped.values[[1, 2, k]] = zv.values[[0, 0, k]];
        }
        let a = dqam_apply(&features(2, 3, 4), &zv, &p).unwrap();
        let b = dqam_apply(&features(2, 3, 4), &swapped, &p).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_query_mode_has_narrow_projection() {
        let single = params(6, 4, 3, false, 4);
        let double = params(6, 4, 3, true, 4);
        assert!(single.learned_query.is_none() && single.w_q_learned.is_none());
        let width = |p: &FusionParams<ArrayD<f64>>| {
            p.w_q_numeric.shape()[0] + p.w_q_learned.as_ref().map_or(0, |w| w.shape()[0])
        };
        assert_eq!(width(&single), 4);
        assert_eq!(width(&double), 8);
        assert!(dqam_apply(&features(2, 3, 4), &vision(2, 2, 3, 0.0), &single).is_ok());
    }

    #[test]
    fn empty_vision_rejected() {
        let p = params(6, 4, 3, true, 5);
        let zv = VisionFeatures {
            values: Array3::zeros((0, 2, 3)),
        };
        assert!(matches!(dqam_apply(&features(2, 3, 4), &zv, &p), Err(Error::EmptyVision)));
    }
}
