//! Stacked graph-convolutional GRU over the station window.

use ndarray::{Array2, Array3, ArrayD, ArrayView3, Axis, Ix2, Ix3};
use vnnet_autograd::{Tape, Var};

use crate::error::{ensure_finite, Error, Result};
use crate::graph_core::{learned_adjacency, sdgc, step_embeddings, CalendarIndex, EmbeddingTables, NaplPools};
use crate::params::{ParamBuilder, ParamId};

/// Parameters of one graph GRU layer. The decoder reuses this type with no
/// dynamic graph (`dynamic_proj` and every `pool_dynamic` absent).
#[derive(Debug, Clone, PartialEq)]
pub struct SdgruParams<P> {
    pub update: NaplPools<P>,
    pub reset: NaplPools<P>,
    pub candidate: NaplPools<P>,
    /// `W₁, W₂ : [D_in + F, d_e]`; the dynamic graph is built from `[x_t, h_{t-1}]`.
    pub dynamic_proj: Option<(P, P)>,
}

impl<P> SdgruParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> SdgruParams<Q> {
        SdgruParams {
            update: self.update.map(&mut f),
            reset: self.reset.map(&mut f),
            candidate: self.candidate.map(&mut f),
            dynamic_proj: self.dynamic_proj.as_ref().map(|(a, b)| (f(a), f(b))),
        }
    }

    pub fn has_dynamic_graph(&self) -> bool {
        self.dynamic_proj.is_some()
    }
}

fn init_pools(b: &mut ParamBuilder<'_>, name: &str, embed: usize, input: usize, out: usize, dynamic: bool) -> NaplPools<ParamId> {
    let mut b = b.scope(name);
    NaplPools {
        pool_static: b.uniform("pool_static", &[embed, input, out], input),
        pool_dynamic: dynamic.then(|| b.uniform("pool_dynamic", &[embed, input, out], input)),
        pool_bias: b.uniform("pool_bias", &[embed, out], input),
    }
}

/// Registers one layer's parameters. `input` is the per-node input width.
pub fn init_sdgru(b: &mut ParamBuilder<'_>, input: usize, hidden: usize, embed: usize, dynamic: bool) -> SdgruParams<ParamId> {
    let gate_in = input + hidden;
    SdgruParams {
        update: init_pools(b, "update", embed, gate_in, hidden, dynamic),
        reset: init_pools(b, "reset", embed, gate_in, hidden, dynamic),
        candidate: init_pools(b, "candidate", embed, gate_in, hidden, dynamic),
        dynamic_proj: dynamic.then(|| {
            (
                b.uniform("dynamic_w1", &[gate_in, embed], gate_in),
                b.uniform("dynamic_w2", &[gate_in, embed], gate_in),
            )
        }),
    }
}

/// One recurrence step. `x: [B, N, D_in]`, `h: [B, N, F]`, `static_adj` is the
/// softmax part of the static graph (`[N, N]` or `[B, N, N]`).
pub fn sdgru_cell<'t>(x: Var<'t>, h: Var<'t>, static_adj: Var<'t>, node: Var<'t>, params: &SdgruParams<Var<'t>>) -> Var<'t> {
    let tape = x.tape();
    let hidden = h.shape()[2];
    let gate_in = tape.concat(&[x, h], 2);
    let dynamic_adj = params
        .dynamic_proj
        .map(|(w1, w2)| learned_adjacency(gate_in.matmul(w1), gate_in.matmul(w2)));

    // update and reset gates evaluated as one convolution with stacked pools
    let (u, r) = (&params.update, &params.reset);
    let stacked = NaplPools {
        pool_static: tape.concat(&[u.pool_static, r.pool_static], 2),
        pool_dynamic: match (u.pool_dynamic, r.pool_dynamic) {
            (Some(a), Some(b)) => Some(tape.concat(&[a, b], 2)),
            _ => None,
        },
        pool_bias: tape.concat(&[u.pool_bias, r.pool_bias], 1),
    };
    let gates = sdgc(gate_in, static_adj, dynamic_adj, node, &stacked).sigmoid();
    let update = gates.narrow(2, 0, hidden);
    let reset = gates.narrow(2, hidden, hidden);

    let candidate_in = tape.concat(&[x, reset.mul(h)], 2);
    let candidate = sdgc(candidate_in, static_adj, dynamic_adj, node, &params.candidate).tanh();
    update.mul(h).add(update.one_minus().mul(candidate))
}

/// Runs `layers` over per-step inputs `[B, N, D]` and returns the final hidden
/// state of every layer stacked as `[B, L, N, F]`.
///
/// `stamps[t]` holds the calendar index of step `t` for each batch element.
pub fn encode_sequence<'t>(
    steps: &[Var<'t>],
    stamps: &[Vec<CalendarIndex>],
    tables: &EmbeddingTables<Var<'t>>,
    layers: &[SdgruParams<Var<'t>>],
    hidden: usize,
) -> Result<Var<'t>> {
    if steps.is_empty() {
        return Err(Error::EmptyWindow);
    }
    if layers.is_empty() {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    if stamps.len() != steps.len() {
        return Err(Error::Config(format!("{} steps but {} timestamp rows", steps.len(), stamps.len())));
    }
    let tape = steps[0].tape();
    let shape = steps[0].shape();
    let (batch, nodes) = (shape[0], shape[1]);

    let static_adjs: Vec<Var<'t>> = if tables.time.is_some() {
        stamps
            .iter()
            .map(|s| {
                let e = step_embeddings(tables, s);
                learned_adjacency(e, e)
            })
            .collect()
    } else {
        let shared = learned_adjacency(tables.node, tables.node);
        vec![shared; steps.len()]
    };

    let mut sequence: Vec<Var<'t>> = steps.to_vec();
    let mut finals = Vec::with_capacity(layers.len());
    for layer in layers {
        let mut h = tape.zeros(&[batch, nodes, hidden]);
        let mut outputs = Vec::with_capacity(sequence.len());
        for (x, adj) in sequence.iter().zip(&static_adjs) {
            h = sdgru_cell(*x, h, *adj, tables.node, layer);
            outputs.push(h);
        }
        finals.push(h.reshape(&[batch, 1, nodes, hidden]));
        sequence = outputs;
    }
    let stacked = tape.concat(&finals, 1);
    if !stacked.value().iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence("numerical encoder hidden state".into()));
    }
    Ok(stacked)
}

/// Encoder output `[L_n, N, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericalFeatures {
    pub values: Array3<f64>,
}

/// Single-sample recurrence step `x_t [N, D_in]`, `h_prev [N, F]` with the
/// step embedding `emb_t [N, d_e]` driving the static graph.
pub fn sdgru_step(
    x_t: &Array2<f64>,
    h_prev: &Array2<f64>,
    emb_t: &Array2<f64>,
    node_table: &Array2<f64>,
    params: &SdgruParams<ArrayD<f64>>,
) -> Result<Array2<f64>> {
    let n = x_t.nrows();
    if h_prev.nrows() != n || emb_t.nrows() != n || node_table.nrows() != n {
        return Err(Error::Config("sdgru_step node counts disagree".into()));
    }
    let expected = x_t.ncols() + h_prev.ncols();
    if params.update.pool_static.shape()[1] != expected {
        return Err(Error::Config(format!(
            "gate pools expect {} input channels, got D_in + F = {expected}",
            params.update.pool_static.shape()[1]
        )));
    }
    let tape = Tape::new();
    let x = tape.constant(x_t.clone().into_dyn().insert_axis(Axis(0)));
    let h = tape.constant(h_prev.clone().into_dyn().insert_axis(Axis(0)));
    let e = tape.constant(emb_t.clone().into_dyn());
    let node = tape.constant(node_table.clone().into_dyn());
    let p = params.map(|a| tape.constant(a.clone()));
    let out = sdgru_cell(x, h, learned_adjacency(e, e), node, &p).to_tensor();
    ensure_finite("hidden state", &out).map_err(|_| Error::Divergence("sdgru hidden state".into()))?;
    Ok(out.index_axis_move(Axis(0), 0).into_dimensionality::<Ix2>().expect("rank 2"))
}

/// Runs the stacked encoder over one window `values [T_h, N, D]`.
pub fn encode_numerical(
    values: ArrayView3<'_, f64>,
    stamps: &[CalendarIndex],
    tables: &EmbeddingTables<Array2<f64>>,
    layers: &[SdgruParams<ArrayD<f64>>],
) -> Result<NumericalFeatures> {
    let (t_h, _, _) = values.dim();
    if t_h == 0 {
        return Err(Error::EmptyWindow);
    }
    if stamps.len() != t_h {
        return Err(Error::Config(format!("{t_h} steps but {} timestamps", stamps.len())));
    }
    for s in stamps {
        s.validate()?;
    }
    let hidden = layers
        .first()
        .ok_or_else(|| Error::Config("encoder needs at least one layer".into()))?
        .update
        .pool_static
        .shape()[2];
    let tape = Tape::new();
    let steps: Vec<Var<'_>> = values
        .outer_iter()
        .map(|x| tape.constant(x.to_owned().into_dyn().insert_axis(Axis(0))))
        .collect();
    let stamps: Vec<Vec<CalendarIndex>> = stamps.iter().map(|s| vec![*s]).collect();
    let tables = tables.map(|a| tape.constant(a.clone().into_dyn()));
    let layers: Vec<_> = layers.iter().map(|l| l.map(|a| tape.constant(a.clone()))).collect();
    let out = encode_sequence(&steps, &stamps, &tables, &layers, hidden)?.to_tensor();
    Ok(NumericalFeatures {
        values: out.index_axis_move(Axis(0), 0).into_dimensionality::<Ix3>().expect("rank 3"),
    })
}
