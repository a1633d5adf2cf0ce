//! Node and calendar embeddings, learned adjacency, node-adaptive parameters
//! and the static-dynamic graph convolution shared by every graph layer.
//!
//! Tensors on the tape use `[batch, nodes, channels]` layout. Adjacency
//! matrices are either `[nodes, nodes]` (shared by the whole batch) or
//! `[batch, nodes, nodes]`.

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};
use serde::{Deserialize, Serialize};
use vnnet_autograd::{Tape, Tensor, Var};

use crate::error::{ensure_finite, Error, Result};

/// Calendar components of one hourly step, used to index the time tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CalendarIndex {
    /// 1..=12
    pub month: u32,
    /// 1..=31
    pub day: u32,
    /// 0..=23
    pub hour: u32,
}

impl CalendarIndex {
    pub fn new(month: u32, day: u32, hour: u32) -> Result<Self> {
        let stamp = Self { month, day, hour };
        stamp.validate()?;
        Ok(stamp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=12).contains(&self.month) || !(1..=31).contains(&self.day) || self.hour > 23 {
            return Err(Error::InvalidTimestamp(format!(
                "month {} day {} hour {}",
                self.month, self.day, self.hour
            )));
        }
        Ok(())
    }
}

pub const MONTHS: usize = 12;
pub const DAYS: usize = 31;
pub const HOURS: usize = 24;

/// Month, day-of-month and hour-of-day lookup tables, each `[rows, d_e]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTables<P> {
    pub month: P,
    pub day: P,
    pub hour: P,
}

/// Node table `[N, d_e]` plus optional calendar tables.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTables<P> {
    pub node: P,
    pub time: Option<TimeTables<P>>,
}

impl<P> EmbeddingTables<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> EmbeddingTables<Q> {
        EmbeddingTables {
            node: f(&self.node),
            time: self.time.as_ref().map(|t| TimeTables {
                month: f(&t.month),
                day: f(&t.day),
                hour: f(&t.hour),
            }),
        }
    }
}

/// Per-step embeddings for a list of timestamps.
///
/// Returns `[S, N, d_e]` when time tables are present and the bare node
/// table `[N, d_e]` otherwise (identical for every step).
pub fn step_embeddings<'t>(tables: &EmbeddingTables<Var<'t>>, stamps: &[CalendarIndex]) -> Var<'t> {
    let node = tables.node;
    let Some(time) = &tables.time else {
        return node;
    };
    let tape = node.tape();
    let months: Vec<usize> = stamps.iter().map(|s| s.month as usize - 1).collect();
    let days: Vec<usize> = stamps.iter().map(|s| s.day as usize - 1).collect();
    let hours: Vec<usize> = stamps.iter().map(|s| s.hour as usize).collect();
    let calendar = tape
        .gather_rows(time.month, &months)
        .add(tape.gather_rows(time.day, &days))
        .add(tape.gather_rows(time.hour, &hours));
    let d = calendar.shape()[1];
    calendar.reshape(&[stamps.len(), 1, d]).add(node)
}

/// `softmax(ReLU(L · Rᵀ))` row-wise; rank 2 or batched rank 3.
pub fn learned_adjacency<'t>(left: Var<'t>, right: Var<'t>) -> Var<'t> {
    left.matmul(right.transpose_last()).relu().softmax_last()
}

/// Materializes node-specific parameters: `node [N, d_e] · pool [d_e, ...]`.
pub fn napl<'t>(node: Var<'t>, pool: Var<'t>) -> Var<'t> {
    let pool_shape = pool.shape();
    let n = node.shape()[0];
    let rest: usize = pool_shape[1..].iter().product();
    let flat = node.matmul(pool.reshape(&[pool_shape[0], rest]));
    let mut out_shape = vec![n];
    out_shape.extend_from_slice(&pool_shape[1..]);
    flat.reshape(&out_shape)
}

/// `x [B, N, C]` times per-node `theta [N, C, F]` giving `[B, N, F]`.
pub fn node_matmul<'t>(x: Var<'t>, theta: Var<'t>) -> Var<'t> {
    x.permute(&[1, 0, 2]).matmul(theta).permute(&[1, 0, 2])
}

/// Weight pools from which node-adaptive parameters are materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct NaplPools<P> {
    /// `[d_e, C, F]`
    pub pool_static: P,
    /// `[d_e, C, F]`; absent for layers without a dynamic graph.
    pub pool_dynamic: Option<P>,
    /// `[d_e, F]`
    pub pool_bias: P,
}

impl<P> NaplPools<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> NaplPools<Q> {
        NaplPools {
            pool_static: f(&self.pool_static),
            pool_dynamic: self.pool_dynamic.as_ref().map(&mut f),
            pool_bias: f(&self.pool_bias),
        }
    }
}

/// Learnable scalars of one set of pools; never scales with the node count.
pub fn napl_parameter_count(embed_dim: usize, in_channels: usize, out_channels: usize, dynamic: bool) -> usize {
    let weights = embed_dim * in_channels * out_channels;
    weights + if dynamic { weights } else { 0 } + embed_dim * out_channels
}

/// Static-dynamic graph convolution with node-adaptive weights:
/// `(I + A_s) X Θ₁ + A_d X Θ₂ + b`, where `static_adj` is the softmax part
/// `A_s` (the identity is added here).
pub fn sdgc<'t>(
    x: Var<'t>,
    static_adj: Var<'t>,
    dynamic_adj: Option<Var<'t>>,
    node: Var<'t>,
    pools: &NaplPools<Var<'t>>,
) -> Var<'t> {
    let tape = x.tape();
    let static_term = x.add(static_adj.matmul(x));
    let (features, pool) = match (dynamic_adj, pools.pool_dynamic) {
        (Some(adj), Some(pool_dynamic)) => (
            tape.concat(&[static_term, adj.matmul(x)], 2),
            tape.concat(&[pools.pool_static, pool_dynamic], 1),
        ),
        (None, _) => (static_term, pools.pool_static),
        (Some(_), None) => panic!("dynamic adjacency supplied to a layer without a dynamic pool"),
    };
    node_matmul(features, napl(node, pool)).add(napl(node, pools.pool_bias))
}

fn to_array2(t: Tensor) -> Array2<f64> {
    t.into_dimensionality::<Ix2>().expect("rank-2 result")
}

fn to_array3(t: Tensor) -> Array3<f64> {
    t.into_dimensionality::<Ix3>().expect("rank-3 result")
}

fn check_rows_stochastic(name: &str, adj: &Array2<f64>) -> Result<()> {
    if adj.nrows() != adj.ncols() {
        return Err(Error::Invariant(format!("{name} adjacency is not square: {:?}", adj.dim())));
    }
    for (i, row) in adj.outer_iter().enumerate() {
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Invariant(format!("{name} adjacency row {i} has negative entries")));
        }
        let sum = row.sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invariant(format!("{name} adjacency row {i} sums to {sum}")));
        }
    }
    Ok(())
}

/// Sum of node and calendar embeddings for each step: `[T, N, d_e]`.
pub fn build_embedding(tables: &EmbeddingTables<Array2<f64>>, stamps: &[CalendarIndex]) -> Result<Array3<f64>> {
    for stamp in stamps {
        stamp.validate()?;
    }
    let d = tables.node.ncols();
    if d == 0 {
        return Err(Error::Config("embedding dimension must be at least 1".into()));
    }
    if let Some(time) = &tables.time {
        for (name, table, rows) in [("month", &time.month, MONTHS), ("day", &time.day, DAYS), ("hour", &time.hour, HOURS)] {
            if table.dim() != (rows, d) {
                return Err(Error::Config(format!("{name} table must be {rows}x{d}, got {:?}", table.dim())));
            }
            ensure_finite(name, &table.clone().into_dyn())?;
        }
    }
    ensure_finite("node table", &tables.node.clone().into_dyn())?;
    let tape = Tape::new();
    let vars = tables.map(|a| tape.constant(a.clone().into_dyn()));
    let emb = step_embeddings(&vars, stamps).to_tensor();
    let n = tables.node.nrows();
    let full = emb
        .broadcast(ndarray::IxDyn(&[stamps.len(), n, d]))
        .expect("node table broadcasts over steps")
        .to_owned();
    Ok(to_array3(full))
}

/// `softmax(ReLU(E_t E_tᵀ))` for one step embedding `[N, d_e]`.
pub fn static_adjacency(emb: &Array2<f64>) -> Result<Array2<f64>> {
    if emb.nrows() == 0 {
        return Err(Error::Config("static adjacency needs at least one node".into()));
    }
    ensure_finite("step embedding", &emb.clone().into_dyn())?;
    let tape = Tape::new();
    let e = tape.constant(emb.clone().into_dyn());
    Ok(to_array2(learned_adjacency(e, e).to_tensor()))
}

/// `softmax(ReLU((X W₁)(X W₂)ᵀ))` for a signal `[N, C]` and projections `[C, d_e]`.
pub fn dynamic_adjacency(signal: &Array2<f64>, proj_1: &Array2<f64>, proj_2: &Array2<f64>) -> Result<Array2<f64>> {
    if proj_1.nrows() != signal.ncols() || proj_2.nrows() != signal.ncols() || proj_1.ncols() != proj_2.ncols() {
        return Err(Error::Config(format!(
            "dynamic adjacency shapes: signal {:?}, projections {:?} and {:?}",
            signal.dim(),
            proj_1.dim(),
            proj_2.dim()
        )));
    }
    ensure_finite("signal", &signal.clone().into_dyn())?;
    let tape = Tape::new();
    let x = tape.constant(signal.clone().into_dyn());
    let w1 = tape.constant(proj_1.clone().into_dyn());
    let w2 = tape.constant(proj_2.clone().into_dyn());
    Ok(to_array2(learned_adjacency(x.matmul(w1), x.matmul(w2)).to_tensor()))
}

/// Per-node parameter tensor `[N, C, F]` from a `[d_e, C, F]` pool.
pub fn napl_materialize(node_table: &Array2<f64>, pool: &Array3<f64>) -> Result<Array3<f64>> {
    if node_table.ncols() != pool.dim().0 {
        return Err(Error::Config(format!(
            "node table width {} does not match pool depth {}",
            node_table.ncols(),
            pool.dim().0
        )));
    }
    let tape = Tape::new();
    let node = tape.constant(node_table.clone().into_dyn());
    let pool = tape.constant(pool.clone().into_dyn());
    Ok(to_array3(napl(node, pool).to_tensor()))
}

/// The two adjacencies used by one graph convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyPair {
    pub static_adj: Array2<f64>,
    pub dynamic_adj: Array2<f64>,
}

impl AdjacencyPair {
    pub fn validate(&self) -> Result<()> {
        check_rows_stochastic("static", &self.static_adj)?;
        check_rows_stochastic("dynamic", &self.dynamic_adj)
    }
}

/// Single-sample static-dynamic graph convolution `x [N, C] -> [N, F]`.
pub fn sdgc_apply(
    x: &Array2<f64>,
    adj: &AdjacencyPair,
    node_table: &Array2<f64>,
    pools: &NaplPools<ArrayD<f64>>,
) -> Result<Array2<f64>> {
    adj.validate()?;
    let n = x.nrows();
    if adj.static_adj.nrows() != n || adj.dynamic_adj.nrows() != n || node_table.nrows() != n {
        return Err(Error::Config(format!("node count mismatch: x has {n} rows")));
    }
    let (d, c) = (node_table.ncols(), x.ncols());
    let ps = pools.pool_static.shape();
    if ps.len() != 3 || ps[0] != d || ps[1] != c {
        return Err(Error::Config(format!("static pool shape {ps:?} incompatible with d_e={d}, C={c}")));
    }
    if pools.pool_dynamic.as_ref().is_some_and(|p| p.shape() != ps) {
        return Err(Error::Config("dynamic pool must match static pool shape".into()));
    }
    if pools.pool_bias.shape() != [d, ps[2]] {
        return Err(Error::Config(format!("bias pool must be [{d}, {}]", ps[2])));
    }
    let tape = Tape::new();
    let xv = tape.constant(x.clone().into_dyn().insert_axis(ndarray::Axis(0)));
    let a_s = tape.constant(adj.static_adj.clone().into_dyn());
    let a_d = tape.constant(adj.dynamic_adj.clone().into_dyn());
    let node = tape.constant(node_table.clone().into_dyn());
    let pools = pools.map(|p| tape.constant(p.clone()));
    let dynamic = pools.pool_dynamic.map(|_| a_d);
    let out = sdgc(xv, a_s, dynamic, node, &pools).to_tensor();
    Ok(to_array2(out.index_axis_move(ndarray::Axis(0), 0)))
}
