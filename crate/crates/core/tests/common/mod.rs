//! Loop-level reference implementations and random micro instances shared by
//! the integration tests. Nothing here goes through the tape or a library
//! matrix product.

#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vnnet_core::fusion::{init_fusion, FusionParams, LAYER_NORM_EPS};
use vnnet_core::graph_core::NaplPools;
use vnnet_core::numerical_encoder::{init_sdgru, SdgruParams};
use vnnet_core::params::{Initializer, ParamBuilder, ParamStore};
use vnnet_core::vision_encoder::{init_mscsm, init_vlstm, ConvParams, DenseParams, MscsmParams, VlstmParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn uniform2(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn uniform3(shape: (usize, usize, usize), scale: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Builds parameters through `init`, then redraws every scalar from
/// `U(-scale, scale)` so instances are not tied to the initializer.
fn redrawn<T>(seed: u64, scale: f64, init: impl FnOnce(&mut ParamBuilder<'_>) -> T) -> (T, ParamStore) {
    let mut store = ParamStore::new();
    let mut initializer = Initializer::new(seed);
    let ids = init(&mut ParamBuilder::new(&mut store, &mut initializer));
    let mut r = rng(seed ^ 0xa5a5);
    for t in store.tensors_mut() {
        t.mapv_inplace(|_| r.random_range(-scale..scale));
    }
    (ids, store)
}

pub fn random_sdgru(seed: u64, input: usize, hidden: usize, embed: usize, dynamic: bool) -> SdgruParams<ArrayD<f64>> {
    let (ids, s) = redrawn(seed, 0.7, |b| init_sdgru(b, input, hidden, embed, dynamic));
    ids.map(|id| s.get(*id).clone())
}

pub fn random_mscsm(seed: u64, channels: usize) -> MscsmParams<ArrayD<f64>> {
    let (ids, s) = redrawn(seed, 0.6, |b| init_mscsm(b, channels).unwrap());
    ids.map(|id| s.get(*id).clone())
}

pub fn random_vlstm(seed: u64, input: usize, hidden: usize, attention: bool) -> VlstmParams<ArrayD<f64>> {
    let (ids, s) = redrawn(seed, 0.5, |b| init_vlstm(b, input, hidden, attention).unwrap());
    ids.map(|id| s.get(*id).clone())
}

pub fn random_fusion(seed: u64, rows: usize, hidden: usize, vision: usize, double: bool) -> FusionParams<ArrayD<f64>> {
    let (ids, s) = redrawn(seed, 0.8, |b| init_fusion(b, rows, hidden, vision, double));
    ids.map(|id| s.get(*id).clone())
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `softmax(ReLU(L Rᵀ))` by rows.
pub fn adjacency(left: &Array2<f64>, right: &Array2<f64>) -> Array2<f64> {
    let n = left.nrows();
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..left.ncols() {
                s += left[[i, k]] * right[[j, k]];
            }
            a[[i, j]] = s.max(0.0);
        }
    }
    softmax_rows(&a)
}

pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for i in 0..a.nrows() {
        let m = (0..a.ncols()).map(|j| a[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..a.ncols()).map(|j| (a[[i, j]] - m).exp()).sum();
        for j in 0..a.ncols() {
            out[[i, j]] = (a[[i, j]] - m).exp() / z;
        }
    }
    out
}

pub fn project(x: &Array2<f64>, w: &ArrayD<f64>) -> Array2<f64> {
    let (n, c) = x.dim();
    let k = w.shape()[1];
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        for o in 0..k {
            let mut s = 0.0;
            for q in 0..c {
                s += x[[i, q]] * w[[q, o]];
            }
            out[[i, o]] = s;
        }
    }
    out
}

/// Node `i`'s own weights: `Σ_k E[i,k] · pool[k, ..]`.
fn node_weights(e: &Array2<f64>, pool: &ArrayD<f64>, i: usize) -> Array2<f64> {
    let (c, f) = (pool.shape()[1], pool.shape()[2]);
    let mut w = Array2::zeros((c, f));
    for k in 0..e.ncols() {
        for a in 0..c {
            for b in 0..f {
                w[[a, b]] += e[[i, k]] * pool[[k, a, b]];
            }
        }
    }
    w
}

/// `Z = (I + A_s) X W_s + A_d X W_d + b` with node-adaptive `W_s, W_d, b`.
pub fn sdgc(
    x: &Array2<f64>,
    a_s: &Array2<f64>,
    a_d: Option<&Array2<f64>>,
    e_n: &Array2<f64>,
    pools: &NaplPools<ArrayD<f64>>,
) -> Array2<f64> {
    let (n, c) = x.dim();
    let f = pools.pool_static.shape()[2];
    let mut z = Array2::zeros((n, f));
    for i in 0..n {
        let ws = node_weights(e_n, &pools.pool_static, i);
        let wd = pools.pool_dynamic.as_ref().map(|p| node_weights(e_n, p, i));
        for o in 0..f {
            let mut acc = 0.0;
            for k in 0..e_n.ncols() {
                acc += e_n[[i, k]] * pools.pool_bias[[k, o]];
            }
            for j in 0..n {
                let a = if i == j { 1.0 } else { 0.0 } + a_s[[i, j]];
                for q in 0..c {
                    acc += a * x[[j, q]] * ws[[q, o]];
                    if let (Some(ad), Some(wd)) = (a_d, &wd) {
                        acc += ad[[i, j]] * x[[j, q]] * wd[[q, o]];
                    }
                }
            }
            z[[i, o]] = acc;
        }
    }
    z
}

fn hcat(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    Array2::from_shape_fn((n, a.ncols() + b.ncols()), |(i, j)| {
        if j < a.ncols() {
            a[[i, j]]
        } else {
            b[[i, j - a.ncols()]]
        }
    })
}

/// One graph GRU step: gates from `[x, h]`, candidate from `[x, r ⊙ h]`.
pub fn sdgru_step(
    x: &Array2<f64>,
    h: &Array2<f64>,
    emb_t: &Array2<f64>,
    e_n: &Array2<f64>,
    p: &SdgruParams<ArrayD<f64>>,
) -> Array2<f64> {
    let a_s = adjacency(emb_t, emb_t);
    let xh = hcat(x, h);
    let a_d = p
        .dynamic_proj
        .as_ref()
        .map(|(w1, w2)| adjacency(&project(&xh, w1), &project(&xh, w2)));
    let z = sdgc(&xh, &a_s, a_d.as_ref(), e_n, &p.update).mapv(sigmoid);
    let r = sdgc(&xh, &a_s, a_d.as_ref(), e_n, &p.reset).mapv(sigmoid);
    let rh = &r * h;
    let cand = sdgc(&hcat(x, &rh), &a_s, a_d.as_ref(), e_n, &p.candidate).mapv(f64::tanh);
    Array2::from_shape_fn(h.dim(), |(i, j)| z[[i, j]] * h[[i, j]] + (1.0 - z[[i, j]]) * cand[[i, j]])
}

/// Zero-padded, stride-1 cross-correlation on an `h × w × c` map with
/// padding that preserves the size.
pub fn conv_same(x: &Array3<f64>, conv: &ConvParams<ArrayD<f64>>, dilation: usize) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let k = &conv.kernel;
    let (out_c, ks) = (k.shape()[0], k.shape()[2]);
    let pad = (dilation * (ks - 1) / 2) as isize;
    let mut out = Array3::zeros((h, w, out_c));
    for i in 0..h {
        for j in 0..w {
            for o in 0..out_c {
                let mut acc = conv.bias[[o]];
                for u in 0..ks {
                    for v in 0..ks {
                        let y = i as isize + (u * dilation) as isize - pad;
                        let z = j as isize + (v * dilation) as isize - pad;
                        if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                            continue;
                        }
                        for q in 0..c {
                            acc += x[[y as usize, z as usize, q]] * k[[o, q, u, v]];
                        }
                    }
                }
                out[[i, j, o]] = acc;
            }
        }
    }
    out
}

fn dense(x: &Array1<f64>, p: &DenseParams<ArrayD<f64>>) -> Array1<f64> {
    let out = p.weight.shape()[1];
    Array1::from_shape_fn(out, |o| p.bias[[o]] + (0..x.len()).map(|q| x[q] * p.weight[[q, o]]).sum::<f64>())
}

/// Pyramid, channel and spatial maps, then `F_m ⊙ σ(M_c ⊙ M_s)`.
pub fn mscsm(f_in: &Array3<f64>, p: &MscsmParams<ArrayD<f64>>) -> Array3<f64> {
    let (h, w, c) = f_in.dim();
    let branches = [
        conv_same(f_in, &p.fpm[0], 1),
        conv_same(f_in, &p.fpm[1], 1),
        conv_same(f_in, &p.fpm[2], 2),
        conv_same(f_in, &p.fpm[3], 4),
    ];
    let q = c / 4;
    let f_m = Array3::from_shape_fn((h, w, c), |(i, j, ch)| branches[ch / q][[i, j, ch % q]]);

    let mut avg = Array1::zeros(c);
    let mut max = Array1::from_elem(c, f64::NEG_INFINITY);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                avg[ch] += f_m[[i, j, ch]] / (h * w) as f64;
                max[ch] = f64::max(max[ch], f_m[[i, j, ch]]);
            }
        }
    }
    let mlp = |v: &Array1<f64>| dense(&dense(v, &p.mlp_hidden).mapv(|x| x.max(0.0)), &p.mlp_out);
    let m_c = mlp(&avg) + mlp(&max);

    let pooled = Array3::from_shape_fn((h, w, 2), |(i, j, k)| {
        let row = (0..c).map(|ch| f_m[[i, j, ch]]);
        if k == 0 {
            row.sum::<f64>() / c as f64
        } else {
            row.fold(f64::NEG_INFINITY, f64::max)
        }
    });
    let m_s = conv_same(&pooled, &p.spatial, 1);
    Array3::from_shape_fn((h, w, c), |(i, j, ch)| f_m[[i, j, ch]] * sigmoid(m_c[ch] * m_s[[i, j, 0]]))
}

/// One V-LSTM step on `h × w` maps. Returns `(hidden, cell)`.
pub fn vlstm_step(
    frame: &Array3<f64>,
    hidden: &Array3<f64>,
    cell: &Array3<f64>,
    p: &VlstmParams<ArrayD<f64>>,
) -> (Array3<f64>, Array3<f64>) {
    let (h, w, c) = frame.dim();
    let f = hidden.dim().2;
    let width = p.input_gate.kernel.shape()[1];
    let mut x = Array3::from_shape_fn((h, w, width), |(i, j, k)| {
        if k < c {
            frame[[i, j, k]]
        } else if k < c + f {
            hidden[[i, j, k - c]]
        } else {
            0.0
        }
    });
    if let Some(m) = &p.mscsm {
        x = mscsm(&x, m);
    }
    let i_g = conv_same(&x, &p.input_gate, 1).mapv(sigmoid);
    let f_g = conv_same(&x, &p.forget_gate, 1).mapv(sigmoid);
    let g_g = conv_same(&x, &p.cell_gate, 1).mapv(f64::tanh);
    let o_g = conv_same(&x, &p.output_gate, 1).mapv(sigmoid);
    let c_new = Array3::from_shape_fn(cell.dim(), |ix| f_g[ix] * cell[ix] + i_g[ix] * g_g[ix]);
    let h_new = Array3::from_shape_fn(cell.dim(), |ix| o_g[ix] * c_new[ix].tanh());
    (h_new, c_new)
}

/// Cross attention of numerical rows (plus the learned query) on vision
/// tokens, residual, layer norm. Returns `(output [L,N,F], weights)`.
pub fn dqam(z_n: &Array3<f64>, z_v: &Array3<f64>, p: &FusionParams<ArrayD<f64>>) -> (Array3<f64>, Array2<f64>) {
    let (l, n, f) = z_n.dim();
    let (hh, ww, cv) = z_v.dim();
    let rows = l * n;
    let tokens = hh * ww;
    let row = |r: usize, k: usize| z_n[[r / n, r % n, k]];
    let tok = |t: usize, k: usize| z_v[[t / ww, t % ww, k]];

    let mut q = Array2::<f64>::zeros((rows, f));
    for r in 0..rows {
        for o in 0..f {
            let mut s = 0.0;
            for k in 0..f {
                s += row(r, k) * p.w_q_numeric[[k, o]];
                if let (Some(zl), Some(wl)) = (&p.learned_query, &p.w_q_learned) {
                    s += zl[[r, k]] * wl[[k, o]];
                }
            }
            q[[r, o]] = s;
        }
    }
    let mut keys = Array2::<f64>::zeros((tokens, f));
    let mut vals = Array2::<f64>::zeros((tokens, f));
    for t in 0..tokens {
        for o in 0..f {
            for k in 0..cv {
                keys[[t, o]] += tok(t, k) * p.w_k[[k, o]];
                vals[[t, o]] += tok(t, k) * p.w_v[[k, o]];
            }
        }
    }
    let mut scores = Array2::<f64>::zeros((rows, tokens));
    for r in 0..rows {
        for t in 0..tokens {
            scores[[r, t]] = (0..f).map(|o| q[[r, o]] * keys[[t, o]]).sum::<f64>() / (f as f64).sqrt();
        }
    }
    let a = softmax_rows(&scores);
    let mut out = Array3::zeros((l, n, f));
    for r in 0..rows {
        let pre: Vec<f64> = (0..f)
            .map(|o| row(r, o) + (0..tokens).map(|t| a[[r, t]] * vals[[t, o]]).sum::<f64>())
            .collect();
        let mean = pre.iter().sum::<f64>() / f as f64;
        let var = pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f as f64;
        for o in 0..f {
            out[[r / n, r % n, o]] = (pre[o] - mean) / (var + LAYER_NORM_EPS).sqrt() * p.ln_scale[[o]] + p.ln_shift[[o]];
        }
    }
    (out, a)
}

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation between `sdgc_apply` (plus both adjacency builders) and
/// the loop oracle on one random instance.
pub fn sdgc_instance(seed: u64) -> f64 {
    use vnnet_core::graph_core::{dynamic_adjacency, sdgc_apply, static_adjacency, AdjacencyPair};
    let mut r = rng(seed);
    let n = r.random_range(1..=4);
    let d = r.random_range(1..=3);
    let c = r.random_range(1..=4);
    let f = r.random_range(1..=4);
    let dynamic = r.random_bool(0.7);
    let x = uniform2(n, c, 1.5, &mut r);
    let e_t = uniform2(n, d, 1.5, &mut r);
    let e_n = uniform2(n, d, 1.0, &mut r);
    let w1 = uniform2(c, d, 1.0, &mut r);
    let w2 = uniform2(c, d, 1.0, &mut r);
    let pools = NaplPools {
        pool_static: uniform(&[d, c, f], 0.8, &mut r),
        pool_dynamic: dynamic.then(|| uniform(&[d, c, f], 0.8, &mut r)),
        pool_bias: uniform(&[d, f], 0.8, &mut r),
    };
    let a_s = adjacency(&e_t, &e_t);
    let a_d = adjacency(&project(&x, &w1.clone().into_dyn()), &project(&x, &w2.clone().into_dyn()));
    let adj = AdjacencyPair {
        static_adj: static_adjacency(&e_t).unwrap(),
        dynamic_adj: dynamic_adjacency(&x, &w1, &w2).unwrap(),
    };
    let want = sdgc(&x, &a_s, dynamic.then_some(&a_d), &e_n, &pools);
    let got = sdgc_apply(&x, &adj, &e_n, &pools).unwrap();
    max_abs_diff(&got, &want)
        .max(max_abs_diff(&adj.static_adj, &a_s))
        .max(max_abs_diff(&adj.dynamic_adj, &a_d))
}

pub fn sdgru_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(1..=4);
    let d = r.random_range(1..=3);
    let input = r.random_range(1..=3);
    let f = r.random_range(1..=4);
    let dynamic = r.random_bool(0.7);
    let p = random_sdgru(seed, input, f, d, dynamic);
    let x = uniform2(n, input, 1.5, &mut r);
    let h = uniform2(n, f, 1.0, &mut r);
    let e_t = uniform2(n, d, 1.5, &mut r);
    let e_n = uniform2(n, d, 1.0, &mut r);
    let got = vnnet_core::numerical_encoder::sdgru_step(&x, &h, &e_t, &e_n, &p).unwrap();
    max_abs_diff(&got, &sdgru_step(&x, &h, &e_t, &e_n, &p))
}

pub fn mscsm_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let h = r.random_range(1..=8);
    let w = r.random_range(1..=8);
    let c = 4 * r.random_range(1..=3);
    let p = random_mscsm(seed, c);
    let x = uniform3((h, w, c), 1.0, &mut r);
    let got = vnnet_core::vision_encoder::mscsm_apply(x.view(), &p).unwrap();
    max_abs_diff(&got, &mscsm(&x, &p))
}

pub fn vlstm_instance(seed: u64) -> f64 {
    let mut r = rng(seed);
    let h = r.random_range(1..=8);
    let w = r.random_range(1..=8);
    let c = r.random_range(1..=3);
    let f = r.random_range(1..=4);
    let attention = r.random_bool(0.6);
    let p = random_vlstm(seed, c, f, attention);
    let frame = uniform3((h, w, c), 1.0, &mut r);
    let state = vnnet_core::vision_encoder::VlstmState {
        hidden: uniform3((h, w, f), 0.8, &mut r),
        cell: uniform3((h, w, f), 0.8, &mut r),
    };
    let got = vnnet_core::vision_encoder::vlstm_step(frame.view(), &state, &p).unwrap();
    let (hid, cell) = vlstm_step(&frame, &state.hidden, &state.cell, &p);
    max_abs_diff(&got.hidden, &hid).max(max_abs_diff(&got.cell, &cell))
}

pub fn dqam_instance(seed: u64) -> f64 {
    use vnnet_core::fusion::dqam_with_weights;
    use vnnet_core::numerical_encoder::NumericalFeatures;
    use vnnet_core::vision_encoder::VisionFeatures;
    let mut r = rng(seed);
    let l = r.random_range(1..=2);
    let n = r.random_range(1..=4);
    let f = r.random_range(2..=4);
    let hh = r.random_range(1..=4);
    let ww = r.random_range(1..=4);
    let cv = r.random_range(1..=4);
    let double = r.random_bool(0.5);
    let p = random_fusion(seed, l * n, f, cv, double);
    let z_n = uniform3((l, n, f), 1.5, &mut r);
    let z_v = uniform3((hh, ww, cv), 1.5, &mut r);
    let (got, weights) = dqam_with_weights(
        &NumericalFeatures { values: z_n.clone() },
        &VisionFeatures { values: z_v.clone() },
        &p,
    )
    .unwrap();
    let (want, a) = dqam(&z_n, &z_v, &p);
    max_abs_diff(&got, &want).max(max_abs_diff(&weights, &a))
}

/// Micro stacks for gradient checking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    Encoder,
    Vision,
    Fusion,
    Decoder,
}

impl Stack {
    pub const ALL: [Stack; 4] = [Stack::Encoder, Stack::Vision, Stack::Fusion, Stack::Decoder];
}

/// Compares tape gradients of `Σ w ⊙ stack(params)` with central differences
/// over every scalar of the stack's store. Returns the worst relative error
/// and the number of scalars checked.
pub fn gradient_check(stack: Stack, seed: u64) -> (f64, usize) {
    use vnnet_autograd::check::{central_difference, max_relative_error};
    use vnnet_autograd::Tape;

    let (store, forward) = stack_instance(stack, seed);
    let shape = {
        let tape = Tape::new();
        forward(&tape, &store.bind_frozen(&tape)).shape()
    };
    let weights = uniform(&shape, 1.0, &mut rng(seed ^ 0x77));
    let loss = |s: &ParamStore| -> f64 {
        let tape = Tape::new();
        (&forward(&tape, &s.bind_frozen(&tape)).to_tensor() * &weights).sum()
    };
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let out = forward(&tape, &bound).mul(tape.constant(weights.clone())).sum();
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for id in store.ids() {
        let analytic = grads.get_or_zeros(bound[id]);
        let numeric = central_difference(
            |x| {
                let mut probe = store.clone();
                *probe.get_mut(id) = x.clone();
                loss(&probe)
            },
            store.get(id),
            1e-4,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    (worst, store.num_scalars())
}

type Forward = Box<dyn for<'t> Fn(&'t vnnet_autograd::Tape, &vnnet_core::params::Bound<'t>) -> vnnet_autograd::Var<'t>>;

fn stack_instance(stack: Stack, seed: u64) -> (ParamStore, Forward) {
    use vnnet_core::decoder::{decode, init_decoder};
    use vnnet_core::fusion::dqam;
    use vnnet_core::graph_core::{CalendarIndex, EmbeddingTables, TimeTables, DAYS, HOURS, MONTHS};
    use vnnet_core::numerical_encoder::encode_sequence;
    use vnnet_core::vision_encoder::{encode_frames, init_vision_encoder};

    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let mut r = rng(seed);
    let mut b = ParamBuilder::new(&mut store, &mut init);
    let forward: Forward = match stack {
        Stack::Encoder => {
            let (n, d, f, e, t, batch) = (3, 2, 3, 2, 3, 2);
            let tables = EmbeddingTables {
                node: b.uniform("node", &[n, e], 1),
                time: Some(TimeTables {
                    month: b.uniform("month", &[MONTHS, e], 1),
                    day: b.uniform("day", &[DAYS, e], 1),
                    hour: b.uniform("hour", &[HOURS, e], 1),
                }),
            };
            let layers = vec![
                init_sdgru(&mut b.scope("layer.0"), d, f, e, true),
                init_sdgru(&mut b.scope("layer.1"), f, f, e, true),
            ];
            let inputs = b.constant("inputs", &[t, batch, n, d], 0.0);
            let stamps: Vec<Vec<CalendarIndex>> = (0..t)
                .map(|s| (0..batch).map(|k| CalendarIndex::new(2 + k as u32, 10 + s as u32, (5 * s + k) as u32).unwrap()).collect())
                .collect();
            *store.get_mut(inputs) = uniform(&[t, batch, n, d], 1.0, &mut r);
            Box::new(move |_, p| {
                let steps: Vec<_> = (0..t).map(|s| p[inputs].select(0, s)).collect();
                let tab = tables.map(|id| p[*id]);
                let layers: Vec<_> = layers.iter().map(|l| l.map(|id| p[*id])).collect();
                encode_sequence(&steps, &stamps, &tab, &layers, f).unwrap()
            })
        }
        Stack::Vision => {
            let (t, bands, side) = (2, 2, 4);
            let params = init_vision_encoder(&mut b.scope("vision"), bands, &[2, 2], 3, true).unwrap();
            let frames = b.constant("frames", &[t, 1, bands, side, side], 0.0);
            *store.get_mut(frames) = uniform(&[t, 1, bands, side, side], 1.0, &mut r);
            Box::new(move |_, p| {
                let steps: Vec<_> = (0..t).map(|s| p[frames].select(0, s)).collect();
                encode_frames(&steps, &params.map(|id| p[*id])).unwrap()
            })
        }
        Stack::Fusion => {
            let (l, n, f, cv) = (2, 3, 4, 4);
            let params = init_fusion(&mut b.scope("fusion"), l * n, f, cv, true);
            let z_n = b.constant("z_n", &[1, l, n, f], 0.0);
            let z_v = b.constant("z_v", &[1, cv, 3, 2], 0.0);
            *store.get_mut(z_n) = uniform(&[1, l, n, f], 1.0, &mut r);
            *store.get_mut(z_v) = uniform(&[1, cv, 3, 2], 1.0, &mut r);
            // a non-trivial affine so its gradients are exercised too
            for id in store.ids().collect::<Vec<_>>() {
                if store.name(id).starts_with("fusion.ln_") {
                    let v = uniform(store.get(id).shape(), 1.0, &mut r);
                    *store.get_mut(id) = v;
                }
            }
            Box::new(move |_, p| dqam(p[z_n], p[z_v], &params.map(|id| p[*id])).unwrap().output)
        }
        Stack::Decoder => {
            let (layers, n, f, e, batch, horizon) = (2, 3, 3, 2, 2, 3);
            let params = init_decoder(&mut b.scope("decoder"), layers, f, e);
            let node = b.uniform("node", &[n, e], 1);
            let init_state = b.constant("init", &[batch, layers, n, f], 0.0);
            let last = b.constant("last", &[batch, n, 1], 0.0);
            let teacher = b.constant("teacher", &[batch, horizon, n, 1], 0.0);
            for id in [init_state, last, teacher] {
                let v = uniform(store.get(id).shape(), 1.0, &mut r);
                *store.get_mut(id) = v;
            }
            Box::new(move |_, p| {
                decode(
                    p[init_state],
                    p[last],
                    Some(p[teacher]),
                    &[true, false, true],
                    p[node],
                    &params.map(|id| p[*id]),
                )
                .unwrap()
            })
        }
    };
    (store, forward)
}

/// A synthetic micro dataset written to a fresh temporary directory.
pub fn micro_dataset(seed: u64, hours: usize) -> (tempfile::TempDir, vnnet_ingest::Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = vnnet_ingest::SynthConfig {
        hours,
        ..vnnet_ingest::SynthConfig::micro(seed)
    };
    vnnet_ingest::synthesize_dataset(&cfg, dir.path()).unwrap();
    let ds = vnnet_ingest::Dataset::open(dir.path(), None).unwrap();
    (dir, ds)
}

/// Small shapes that train in seconds.
pub fn tiny_config(seed: u64) -> vnnet_core::training::TrainConfig {
    vnnet_core::training::TrainConfig {
        t_h: 6,
        t_p: 3,
        hidden: 8,
        embed: 4,
        encoder_layers: 2,
        vision_layers: 2,
        vision_hidden: 4,
        k: 20.0,
        batch: 16,
        epochs: 3,
        seed,
        split: vnnet_core::data::SplitConfig::Fractions {
            train: 0.6,
            validation: 0.2,
        },
        ..Default::default()
    }
}
