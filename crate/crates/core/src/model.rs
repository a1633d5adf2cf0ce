//! The assembled forecaster: graph encoder, optional vision branch, fusion
//! and decoder, plus the ablation switches that turn it into each ladder row.

use std::fmt;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use vnnet_autograd::{Tape, Var};

use crate::decoder::{decode, init_decoder, DecoderParams};
use crate::error::{Error, Result};
use crate::fusion::{dqam, init_fusion, FusionParams};
use crate::graph_core::{CalendarIndex, EmbeddingTables, TimeTables, DAYS, HOURS, MONTHS};
use crate::numerical_encoder::{encode_sequence, init_sdgru, SdgruParams};
use crate::params::{Bound, Initializer, ParamBuilder, ParamId, ParamStore};
use crate::vision_encoder::{check_spatial, encode_frames, init_vision_encoder, VisionEncoderParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VisionBranch {
    None,
    ConvLstm,
    VLstm,
}

impl fmt::Display for VisionBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VisionBranch::None => "-",
            VisionBranch::ConvLstm => "ConvLSTM",
            VisionBranch::VLstm => "V-LSTM",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryMode {
    Single,
    Double,
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::Single => "Single",
            QueryMode::Double => "Double",
        })
    }
}

/// Shapes and switches of one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub nodes: usize,
    /// Numerical channels per station, `D`.
    pub channels: usize,
    /// Satellite bands, `C_s`.
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub t_h: usize,
    pub t_p: usize,
    /// `F`
    pub hidden: usize,
    /// `d_e`
    pub embed: usize,
    /// `L_n`
    pub encoder_layers: usize,
    /// `L_v`
    pub vision_layers: usize,
    /// Hidden channels of every vision layer.
    pub vision_hidden: usize,
    pub time_embedding: bool,
    pub vision: VisionBranch,
    pub query: QueryMode,
    /// Channel of the numerical input that is forecast.
    pub target_channel: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("nodes", self.nodes),
            ("channels", self.channels),
            ("t_h", self.t_h),
            ("t_p", self.t_p),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("encoder_layers", self.encoder_layers),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.target_channel >= self.channels {
            return Err(Error::Config(format!(
                "target channel {} outside {} channels",
                self.target_channel, self.channels
            )));
        }
        if self.has_vision() {
            if self.bands == 0 || self.vision_layers == 0 || self.vision_hidden == 0 {
                return Err(Error::Config("vision branch needs bands, layers and hidden channels".into()));
            }
            check_spatial(self.height, self.width, self.vision_layers)?;
        }
        Ok(())
    }

    pub fn has_vision(&self) -> bool {
        self.vision != VisionBranch::None
    }
}

/// All parameter groups of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub tables: EmbeddingTables<P>,
    pub encoder: Vec<SdgruParams<P>>,
    pub vision: Option<VisionEncoderParams<P>>,
    pub fusion: Option<FusionParams<P>>,
    pub decoder: DecoderParams<P>,
}

impl<P> ModelParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ModelParams<Q> {
        ModelParams {
            tables: self.tables.map(&mut f),
            encoder: self.encoder.iter().map(|l| l.map(&mut f)).collect(),
            vision: self.vision.as_ref().map(|v| v.map(&mut f)),
            fusion: self.fusion.as_ref().map(|q| q.map(&mut f)),
            decoder: self.decoder.map(&mut f),
        }
    }
}

/// One mini-batch on a tape.
pub struct Inputs<'t> {
    /// `[B, T_h, N, D]`, normalized
    pub numerical: Var<'t>,
    /// `stamps[t][b]`
    pub stamps: Vec<Vec<CalendarIndex>>,
    /// `[B, T_h, C_s, H, W]`, scaled to `[0, 1]`
    pub vision: Option<Var<'t>>,
    /// `[B, T_p, N, 1]`, normalized
    pub teacher: Option<Var<'t>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ModelParams<ParamId>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let ids = {
            let mut b = ParamBuilder::new(&mut store, &mut init);
            build(&mut b, &config)?
        };
        Ok(Self { config, store, ids })
    }

    /// Rebuilds the layout for `config` and adopts `store`, which must match it
    /// name for name and shape for shape.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for id in fresh.store.ids() {
            if fresh.store.name(id) != store.name(id) || fresh.store.get(id).shape() != store.get(id).shape() {
                return Err(Error::Checkpoint(format!("parameter {} does not match", fresh.store.name(id))));
            }
        }
        Ok(Self {
            config: fresh.config,
            store,
            ids: fresh.ids,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Scalars belonging to the vision encoder and the fusion module.
    pub fn vision_parameters(&self) -> usize {
        self.store
            .ids()
            .filter(|&id| {
                let name = self.store.name(id);
                name.starts_with("vision.") || name.starts_with("fusion.")
            })
            .map(|id| self.store.get(id).len())
            .sum()
    }

    pub fn bind<'t>(&self, bound: &Bound<'t>) -> ModelParams<Var<'t>> {
        self.ids.map(|&id| bound[id])
    }

    pub fn params_on<'t>(&self, tape: &'t Tape, trainable: bool) -> (Bound<'t>, ModelParams<Var<'t>>) {
        let bound = if trainable {
            self.store.bind(tape)
        } else {
            self.store.bind_frozen(tape)
        };
        let params = self.bind(&bound);
        (bound, params)
    }

    /// Normalized forecasts `[B, T_p, N, 1]`.
    pub fn forward<'t>(&self, params: &ModelParams<Var<'t>>, inputs: &Inputs<'t>, feed_truth: &[bool]) -> Result<Var<'t>> {
        let c = &self.config;
        let shape = inputs.numerical.shape();
        if shape.len() != 4 || shape[1] != c.t_h || shape[2] != c.nodes || shape[3] != c.channels {
            return Err(Error::Config(format!(
                "numerical input {shape:?} does not match [B, {}, {}, {}]",
                c.t_h, c.nodes, c.channels
            )));
        }
        if feed_truth.len() != c.t_p {
            return Err(Error::Config(format!("{} sampling flags for horizon {}", feed_truth.len(), c.t_p)));
        }
        let steps: Vec<Var<'t>> = (0..c.t_h).map(|t| inputs.numerical.select(1, t)).collect();
        let z_n = encode_sequence(&steps, &inputs.stamps, &params.tables, &params.encoder, c.hidden)?;

        let init = match (&params.vision, &params.fusion, inputs.vision) {
            (Some(vision), Some(fusion), Some(frames)) => {
                let vs = frames.shape();
                if vs.len() != 5 || vs[1] != c.t_h || vs[2] != c.bands || vs[3] != c.height || vs[4] != c.width {
                    return Err(Error::Config(format!(
                        "vision input {vs:?} does not match [B, {}, {}, {}, {}]",
                        c.t_h, c.bands, c.height, c.width
                    )));
                }
                let frames: Vec<Var<'t>> = (0..c.t_h).map(|t| frames.select(1, t)).collect();
                let z_v = encode_frames(&frames, vision)?;
                dqam(z_n, z_v, fusion)?.output
            }
            (Some(_), _, None) => return Err(Error::Config("model has a vision branch but no frames were given".into())),
            _ => z_n,
        };

        let last_obs = steps[c.t_h - 1].narrow(2, c.target_channel, 1);
        decode(init, last_obs, inputs.teacher, feed_truth, params.tables.node, &params.decoder)
    }

    /// Forward pass with frozen parameters on plain arrays.
    pub fn predict(
        &self,
        numerical: ArrayD<f64>,
        stamps: Vec<Vec<CalendarIndex>>,
        vision: Option<ArrayD<f64>>,
    ) -> Result<ArrayD<f64>> {
        let tape = Tape::new();
        let (_bound, params) = self.params_on(&tape, false);
        let inputs = Inputs {
            numerical: tape.constant(numerical),
            stamps,
            vision: vision.map(|v| tape.constant(v)),
            teacher: None,
        };
        let mut feed = vec![false; self.config.t_p];
        feed[0] = true;
        Ok(self.forward(&params, &inputs, &feed)?.to_tensor())
    }
}

fn build(b: &mut ParamBuilder<'_>, c: &ModelConfig) -> Result<ModelParams<ParamId>> {
    let tables = {
        let mut t = b.scope("embedding");
        EmbeddingTables {
            node: t.uniform("node", &[c.nodes, c.embed], c.embed),
            time: c.time_embedding.then(|| TimeTables {
                month: t.uniform("month", &[MONTHS, c.embed], c.embed),
                day: t.uniform("day", &[DAYS, c.embed], c.embed),
                hour: t.uniform("hour", &[HOURS, c.embed], c.embed),
            }),
        }
    };
    let encoder = (0..c.encoder_layers)
        .map(|l| {
            let input = if l == 0 { c.channels } else { c.hidden };
            init_sdgru(&mut b.scope(&format!("encoder.layer.{l}")), input, c.hidden, c.embed, true)
        })
        .collect();
    let (vision, fusion) = if c.has_vision() {
        let hidden = vec![c.vision_hidden; c.vision_layers];
        let attention = c.vision == VisionBranch::VLstm;
        let v = init_vision_encoder(&mut b.scope("vision"), c.bands, &hidden, c.hidden, attention)?;
        let q = init_fusion(
            &mut b.scope("fusion"),
            c.encoder_layers * c.nodes,
            c.hidden,
            c.hidden,
            c.query == QueryMode::Double,
        );
        (Some(v), Some(q))
    } else {
        (None, None)
    };
    let decoder = init_decoder(&mut b.scope("decoder"), c.encoder_layers, c.hidden, c.embed);
    Ok(ModelParams {
        tables,
        encoder,
        vision,
        fusion,
        decoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    pub(crate) fn micro(vision: VisionBranch, query: QueryMode, time_embedding: bool) -> ModelConfig {
        ModelConfig {
            nodes: 3,
            channels: 4,
            bands: 2,
            height: 4,
            width: 4,
            t_h: 3,
            t_p: 2,
            hidden: 4,
            embed: 2,
            encoder_layers: 2,
            vision_layers: 2,
            vision_hidden: 2,
            time_embedding,
            vision,
            query,
            target_channel: 0,
        }
    }

    fn stamps(t_h: usize, b: usize) -> Vec<Vec<CalendarIndex>> {
        (0..t_h).map(|t| vec![CalendarIndex::new(3, 5, t as u32).unwrap(); b]).collect()
    }

    #[test]
    fn parameter_counts_grow_along_the_ladder() {
        let rows = [
            micro(VisionBranch::None, QueryMode::Single, false),
            micro(VisionBranch::None, QueryMode::Single, true),
            micro(VisionBranch::ConvLstm, QueryMode::Single, true),
            micro(VisionBranch::VLstm, QueryMode::Single, true),
            micro(VisionBranch::VLstm, QueryMode::Double, true),
        ];
        let counts: Vec<usize> = rows.iter().map(|c| Model::new(c.clone(), 1).unwrap().num_parameters()).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
        let plain = Model::new(rows[1].clone(), 1).unwrap();
        assert_eq!(plain.vision_parameters(), 0);
        assert!(plain.store.names().all(|n| !n.starts_with("vision") && !n.starts_with("fusion")));
    }

    #[test]
    fn forward_shapes_and_store_round_trip() {
        let cfg = micro(VisionBranch::VLstm, QueryMode::Double, true);
        let model = Model::new(cfg.clone(), 5).unwrap();
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 3, 4]), |i| (i[0] + i[1] + i[2] * i[3]) as f64 * 0.1);
        let v = ArrayD::from_shape_fn(IxDyn(&[2, 3, 2, 4, 4]), |i| (i[3] * 4 + i[4]) as f64 / 16.0);
        let out = model.predict(x.clone(), stamps(3, 2), Some(v.clone())).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3, 1]);
        let again = Model::from_store(cfg.clone(), model.store.clone()).unwrap();
        assert_eq!(again.predict(x.clone(), stamps(3, 2), Some(v)).unwrap(), out);
        assert!(model.predict(x, stamps(3, 2), None).is_err());
        let other = Model::new(micro(VisionBranch::ConvLstm, QueryMode::Double, true), 5).unwrap();
        assert!(Model::from_store(cfg, other.store).is_err());
    }
}
