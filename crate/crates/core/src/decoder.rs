//! Autoregressive graph GRU decoder with scheduled sampling.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use vnnet_autograd::{Tape, Var};

use crate::error::{Error, Result};
use crate::graph_core::learned_adjacency;
use crate::numerical_encoder::{init_sdgru, sdgru_cell, SdgruParams};
use crate::params::{ParamBuilder, ParamId};

/// Probability of feeding ground truth at mini-batch `i`: `k / (k + e^{i/k})`.
pub fn scheduled_sampling_prob(i: u64, k: f64) -> Result<f64> {
    sampling_curve(i as f64, k)
}

/// The same decay evaluated at a real-valued batch position.
pub fn sampling_curve(x: f64, k: f64) -> Result<f64> {
    if !(k >= 1.0) || !k.is_finite() {
        return Err(Error::Config(format!("sampling constant k must be >= 1, got {k}")));
    }
    if !(x >= 0.0) {
        return Err(Error::Config(format!("batch position must be non-negative, got {x}")));
    }
    Ok(k / (k + (x / k).exp()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    TeacherForced,
    Scheduled,
    FreeRunning,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSchedule {
    pub k: f64,
    pub mode: SamplingMode,
}

impl SamplingSchedule {
    pub fn new(k: f64, mode: SamplingMode) -> Result<Self> {
        scheduled_sampling_prob(0, k)?;
        Ok(Self { k, mode })
    }

    /// Probability of a ground-truth input at batch `i` under this mode.
    pub fn probability(&self, i: u64) -> Result<f64> {
        match self.mode {
            SamplingMode::TeacherForced => Ok(1.0),
            SamplingMode::FreeRunning => Ok(0.0),
            SamplingMode::Scheduled => scheduled_sampling_prob(i, self.k),
        }
    }

    /// For each of `horizon` steps, whether its input is ground truth.
    /// Step 0 always reads the last observation; later steps draw once each.
    pub fn draw<R: Rng + ?Sized>(&self, i: u64, horizon: usize, rng: &mut R) -> Result<Vec<bool>> {
        let p = self.probability(i)?;
        Ok((0..horizon)
            .map(|s| {
                s == 0
                    || match self.mode {
                        SamplingMode::TeacherForced => true,
                        SamplingMode::FreeRunning => false,
                        SamplingMode::Scheduled => rng.random_bool(p),
                    }
            })
            .collect())
    }

    pub fn needs_teacher(&self) -> bool {
        self.mode != SamplingMode::FreeRunning
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<P> {
    /// Static-graph layers: no dynamic projections or dynamic pools.
    pub layers: Vec<SdgruParams<P>>,
    /// `[F, 1]`
    pub out_weight: P,
    /// `[1]`
    pub out_bias: P,
}

impl<P> DecoderParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> DecoderParams<Q> {
        DecoderParams {
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            out_weight: f(&self.out_weight),
            out_bias: f(&self.out_bias),
        }
    }
}

pub fn init_decoder(b: &mut ParamBuilder<'_>, layers: usize, hidden: usize, embed: usize) -> DecoderParams<ParamId> {
    DecoderParams {
        layers: (0..layers)
            .map(|l| {
                let input = if l == 0 { 1 } else { hidden };
                init_sdgru(&mut b.scope(&format!("layer.{l}")), input, hidden, embed, false)
            })
            .collect(),
        out_weight: b.uniform("out_weight", &[hidden, 1], hidden),
        out_bias: b.uniform("out_bias", &[1], hidden),
    }
}

/// Unrolls the decoder for `feed_truth.len()` steps.
///
/// `init : [B, L_n, N, F]` seeds the hidden states, `last_obs : [B, N, 1]` is
/// the first step's input and `teacher : [B, T_p, N, 1]` supplies ground truth
/// wherever `feed_truth[s]` holds for `s ≥ 1`. Returns `[B, T_p, N, 1]`.
pub fn decode<'t>(
    init: Var<'t>,
    last_obs: Var<'t>,
    teacher: Option<Var<'t>>,
    feed_truth: &[bool],
    node: Var<'t>,
    params: &DecoderParams<Var<'t>>,
) -> Result<Var<'t>> {
    let tape = init.tape();
    let shape = init.shape();
    let (b, l, n) = (shape[0], shape[1], shape[2]);
    if l != params.layers.len() {
        return Err(Error::Config(format!("{l} initial states for {} decoder layers", params.layers.len())));
    }
    if feed_truth.is_empty() {
        return Err(Error::Config("prediction horizon must be at least 1".into()));
    }
    if teacher.is_none() && feed_truth.iter().skip(1).any(|&t| t) {
        return Err(Error::Config("ground-truth inputs requested without targets".into()));
    }
    let adj = learned_adjacency(node, node);
    let mut hidden: Vec<Var<'t>> = (0..l).map(|i| init.select(1, i)).collect();
    let mut input = last_obs;
    let mut outputs = Vec::with_capacity(feed_truth.len());
    for (s, &truth) in feed_truth.iter().enumerate() {
        if s > 0 {
            if truth {
                input = teacher.expect("checked above").select(1, s - 1);
            } else {
                input = *outputs.last().expect("previous step");
            }
        }
        let mut x = input;
        for (h, layer) in hidden.iter_mut().zip(&params.layers) {
            *h = sdgru_cell(x, *h, adj, node, layer);
            x = *h;
        }
        outputs.push(x.matmul(params.out_weight).add(params.out_bias));
    }
    let steps: Vec<Var<'t>> = outputs.iter().map(|o| o.reshape(&[b, 1, n, 1])).collect();
    Ok(tape.concat(&steps, 1))
}

/// Single-sample decode. `init : L_n × N × F`, `last_obs : N × 1`,
/// `teacher : T_p × N × 1`; `horizon` is `T_p`.
#[allow(clippy::too_many_arguments)]
pub fn decode_apply<R: Rng + ?Sized>(
    init: &Array3<f64>,
    last_obs: &Array2<f64>,
    teacher: Option<&Array3<f64>>,
    horizon: usize,
    schedule: SamplingSchedule,
    batch_index: u64,
    rng: &mut R,
    node_table: &Array2<f64>,
    params: &DecoderParams<ArrayD<f64>>,
) -> Result<Array3<f64>> {
    if schedule.needs_teacher() && teacher.is_none() {
        return Err(Error::Config("this sampling mode needs ground-truth targets".into()));
    }
    let teacher = if schedule.needs_teacher() { teacher } else { None };
    if let Some(t) = teacher {
        if t.dim() != (horizon, init.dim().1, 1) {
            return Err(Error::Config(format!("targets {:?} do not match horizon {horizon}", t.dim())));
        }
    }
    let feed = schedule.draw(batch_index, horizon, rng)?;
    let tape = Tape::new();
    let p = params.map(|a| tape.constant(a.clone()));
    let out = decode(
        tape.constant(init.clone().insert_axis(Axis(0)).into_dyn()),
        tape.constant(last_obs.clone().insert_axis(Axis(0)).into_dyn()),
        teacher.map(|t| tape.constant(t.clone().insert_axis(Axis(0)).into_dyn())),
        &feed,
        tape.constant(node_table.clone().into_dyn()),
        &p,
    )?;
    Ok(out.to_tensor().index_axis_move(Axis(0), 0).into_dimensionality::<Ix3>().expect("rank 3"))
}
