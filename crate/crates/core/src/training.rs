//! MAE training with Adam, step learning-rate decay, scheduled sampling and
//! early stopping; evaluation in physical units; checkpoints and metric logs.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array3, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vnnet_autograd::Tape;
use vnnet_ingest::{Dataset, NormStats, SplitName, TargetFactor, VisionStats};

use crate::data::{Batch, PreparedData, SplitConfig};
use crate::decoder::{SamplingMode, SamplingSchedule};
use crate::error::{Error, Result};
use crate::model::{Inputs, Model, ModelConfig, QueryMode, VisionBranch};
use crate::optim::{clip_global_norm, Adam};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Derives an independent seed for the named consumer from the run seed.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the seed, then one splitmix64 round
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t_h: usize,
    pub t_p: usize,
    pub hidden: usize,
    pub embed: usize,
    pub encoder_layers: usize,
    pub vision_layers: usize,
    pub vision_hidden: usize,
    pub k: f64,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub factor: TargetFactor,
    pub time_embedding: bool,
    pub vision: VisionBranch,
    pub query: QueryMode,
    /// Multiplier applied every `lr_decay_every` epochs up to `lr_decay_until`.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lr_decay_until: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub sampling: SamplingMode,
    pub split: SplitConfig,
    /// Stop once the epoch's training MAE falls below this fraction of epoch 1's.
    pub target_train_ratio: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_h: 12,
            t_p: 12,
            hidden: 32,
            embed: 16,
            encoder_layers: 2,
            vision_layers: 3,
            vision_hidden: 32,
            k: 1000.0,
            batch: 16,
            lr: 1e-2,
            epochs: 100,
            early_stop_patience: 30,
            seed: 0,
            factor: TargetFactor::Temperature,
            time_embedding: true,
            vision: VisionBranch::VLstm,
            query: QueryMode::Double,
            lr_decay: 0.5,
            lr_decay_every: 10,
            lr_decay_until: 50,
            clip_norm: None,
            sampling: SamplingMode::Scheduled,
            split: SplitConfig::observational(),
            target_train_ratio: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr decay factor must be in (0, 1], got {}", self.lr_decay)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        if let Some(r) = self.target_train_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("target train ratio must be in (0, 1), got {r}")));
            }
        }
        SamplingSchedule::new(self.k, self.sampling)?;
        Ok(())
    }

    /// Learning rate of 1-based `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.lr;
        }
        let done = epoch.saturating_sub(1).min(self.lr_decay_until);
        self.lr * self.lr_decay.powi((done / self.lr_decay_every) as i32)
    }

    pub fn model_config(&self, data: &PreparedData) -> ModelConfig {
        let (bands, height, width) = data
            .vision
            .as_ref()
            .map(|v| (v.frames.bands, v.frames.height, v.frames.width))
            .unwrap_or((0, 0, 0));
        ModelConfig {
            nodes: data.nodes(),
            channels: data.channels(),
            bands,
            height,
            width,
            t_h: self.t_h,
            t_p: self.t_p,
            hidden: self.hidden,
            embed: self.embed,
            encoder_layers: self.encoder_layers,
            vision_layers: self.vision_layers,
            vision_hidden: self.vision_hidden,
            time_embedding: self.time_embedding,
            vision: self.vision,
            query: self.query,
            target_channel: data.numerical.target,
        }
    }

    /// Loads `dataset` in the shape this configuration needs.
    pub fn prepare(&self, dataset: Dataset) -> Result<PreparedData> {
        PreparedData::new(dataset, &self.split, self.t_h, self.t_p, self.factor, self.vision != VisionBranch::None)
    }
}

/// Error metrics in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub factor: TargetFactor,
    pub mae: f64,
    pub rmse: f64,
    /// Number of compared values.
    pub count: usize,
}

/// Running sums behind a [`MetricReport`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorSums {
    pub abs: f64,
    pub sq: f64,
    pub count: usize,
}

impl ErrorSums {
    pub fn add(&mut self, pred: &Array3<f64>, truth: &Array3<f64>) {
        for (p, t) in pred.iter().zip(truth.iter()) {
            let e = p - t;
            self.abs += e.abs();
            self.sq += e * e;
            self.count += 1;
        }
    }

    pub fn mae(&self) -> f64 {
        self.abs / self.count as f64
    }

    pub fn rmse(&self) -> f64 {
        (self.sq / self.count as f64).sqrt()
    }

    pub fn report(&self, factor: TargetFactor) -> MetricReport {
        MetricReport {
            factor,
            mae: self.mae(),
            rmse: self.rmse(),
            count: self.count,
        }
    }
}

/// MAE and RMSE of two equally long slices.
pub fn mae_rmse(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Config(format!("cannot compare {} predictions with {} targets", pred.len(), truth.len())));
    }
    let n = pred.len() as f64;
    let abs: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    let sq: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((abs / n, (sq / n).sqrt()))
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: SplitName,
    pub factor: TargetFactor,
    pub mae: f64,
    pub rmse: f64,
    pub lr: f64,
    pub p_i: f64,
}

/// Appends rows to a CSV log, writing the header when the file is new.
pub fn append_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut text = String::new();
    if fresh {
        text.push_str("epoch,split,factor,mae,rmse,lr,p_i\n");
    }
    for r in rows {
        text.push_str(&format!("{},{},{},{},{},{},{}\n", r.epoch, r.split, r.factor, r.mae, r.rmse, r.lr, r.p_i));
    }
    file.write_all(text.as_bytes())?;
    Ok(())
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub params: crate::params::ParamStore,
    pub optimizer: Adam,
    /// Global mini-batch counter `i`.
    pub batch_index: u64,
    pub epoch: usize,
    pub best_validation_mae: Option<f64>,
    pub norm: NormStats,
    pub vision_stats: Option<VisionStats>,
    pub columns: Vec<String>,
    pub stations: Vec<String>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_store(self.model.clone(), self.params.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes through a temporary sibling and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    /// Fails unless `data` has the layout and scaling this checkpoint was trained on.
    pub fn check_compatible(&self, data: &PreparedData) -> Result<()> {
        let s = &data.numerical.series;
        if s.columns != self.columns || s.stations != self.stations {
            return Err(Error::Config("dataset stations or columns differ from the checkpoint".into()));
        }
        if data.numerical.stats != self.norm {
            return Err(Error::Config("dataset training statistics differ from the checkpoint".into()));
        }
        let frames = data.vision.as_ref().map(|v| (v.frames.bands, v.frames.height, v.frames.width));
        let expected = self.model.has_vision().then_some((self.model.bands, self.model.height, self.model.width));
        if frames != expected {
            return Err(Error::Config(format!("vision layout {frames:?} does not match checkpoint {expected:?}")));
        }
        Ok(())
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the best validation epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<MetricRow>,
    /// `(i, p_i)` for every mini-batch.
    pub sampling_log: Vec<(u64, f64)>,
    pub epochs_run: usize,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn train_curve(&self) -> Vec<f64> {
        self.history.iter().filter(|r| r.split == SplitName::Train).map(|r| r.mae).collect()
    }

    pub fn validation_curve(&self) -> Vec<f64> {
        self.history.iter().filter(|r| r.split == SplitName::Validation).map(|r| r.mae).collect()
    }
}

fn inputs<'t>(tape: &'t Tape, batch: &Batch, teacher: bool) -> Inputs<'t> {
    Inputs {
        numerical: tape.constant(batch.numerical.clone()),
        stamps: batch.stamps.clone(),
        vision: batch.vision.as_ref().map(|v| tape.constant(v.clone())),
        teacher: teacher.then(|| tape.constant(batch.teacher.clone())),
    }
}

/// Free-running normalized forecasts `[B, T_p, N, 1]` for one batch.
pub fn predict_batch(model: &Model, batch: &Batch) -> Result<ArrayD<f64>> {
    let tape = Tape::new();
    let (_bound, params) = model.params_on(&tape, false);
    let mut feed = vec![false; model.config.t_p];
    feed[0] = true;
    Ok(model.forward(&params, &inputs(&tape, batch, false), &feed)?.to_tensor())
}

/// Free-running MAE and RMSE over every window of `split`.
pub fn evaluate(model: &Model, data: &PreparedData, split: SplitName, batch_size: usize) -> Result<MetricReport> {
    let starts = data.starts(split);
    if starts.is_empty() {
        return Err(Error::Config(format!("{split} split has no complete windows")));
    }
    let mut sums = ErrorSums::default();
    for chunk in starts.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let pred = predict_batch(model, &batch)?;
        if !pred.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite forecast on {split}")));
        }
        sums.add(&data.denormalize(&pred), &batch.targets);
    }
    Ok(sums.report(data.factor))
}

/// Evaluates a checkpoint on `split` of `dataset`.
pub fn evaluate_checkpoint(ck: &Checkpoint, dataset: Dataset, split: SplitName) -> Result<MetricReport> {
    let data = ck.train.prepare(dataset)?;
    ck.check_compatible(&data)?;
    evaluate(&ck.model()?, &data, split, ck.train.batch)
}

struct Snapshot {
    model: Model,
    optimizer: Adam,
    batch_index: u64,
    epoch: usize,
    best: Option<f64>,
}

fn checkpoint_of(config: &TrainConfig, data: &PreparedData, s: &Snapshot) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        train: config.clone(),
        model: s.model.config.clone(),
        params: s.model.store.clone(),
        optimizer: s.optimizer.clone(),
        batch_index: s.batch_index,
        epoch: s.epoch,
        best_validation_mae: s.best,
        norm: data.numerical.stats.clone(),
        vision_stats: data.vision.as_ref().map(|v| v.stats.clone()),
        columns: data.numerical.series.columns.clone(),
        stations: data.numerical.series.stations.clone(),
    }
}

/// Trains a fresh model on `data` and returns the best-validation checkpoint.
pub fn train(config: &TrainConfig, data: &PreparedData) -> Result<TrainOutcome> {
    config.validate()?;
    if data.t_h() != config.t_h || data.t_p() != config.t_p {
        return Err(Error::Config("prepared windows do not match the configured horizons".into()));
    }
    let model = Model::new(config.model_config(data), sub_seed(config.seed, "init"))?;
    let optimizer = Adam::new(&model.store);
    let mut current = Snapshot {
        model,
        optimizer,
        batch_index: 0,
        epoch: 0,
        best: None,
    };
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            checkpoint: checkpoint_of(config, data, &current),
            history: Vec::new(),
            sampling_log: Vec::new(),
            epochs_run: 0,
            stop: StopReason::Completed,
        });
    }

    let mut train_starts = data.starts(SplitName::Train);
    if train_starts.is_empty() {
        return Err(Error::Config("train split has no complete windows".into()));
    }
    if data.starts(SplitName::Validation).is_empty() {
        return Err(Error::Config("validation split has no complete windows".into()));
    }
    let schedule = SamplingSchedule::new(config.k, config.sampling)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "shuffle"));
    let mut sampling_rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "sampling"));

    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let mut sampling_log = Vec::new();
    let mut first_train_mae = None;
    let mut stale = 0;
    let mut stop = StopReason::Completed;
    let mut epochs_run = 0;

    for epoch in 1..=config.epochs {
        let lr = config.learning_rate(epoch);
        train_starts.shuffle(&mut shuffle_rng);
        let mut sums = ErrorSums::default();
        let mut p_last = schedule.probability(current.batch_index)?;
        for chunk in train_starts.chunks(config.batch) {
            let batch = data.batch(chunk)?;
            let i = current.batch_index;
            p_last = schedule.probability(i)?;
            sampling_log.push((i, p_last));
            let feed = schedule.draw(i, config.t_p, &mut sampling_rng)?;

            let tape = Tape::new();
            let (bound, params) = current.model.params_on(&tape, true);
            let pred = current.model.forward(&params, &inputs(&tape, &batch, true), &feed)?;
            let target = tape.constant(batch.teacher.clone());
            let loss = pred.sub(target).abs().mean();
            let value = loss.scalar();
            if !value.is_finite() {
                return Err(Error::Divergence(format!("loss {value} at epoch {epoch}, batch {i}")));
            }
            let grads = tape.backward(loss).map_err(|e| Error::Divergence(e.to_string()))?;
            let mut g: Vec<_> = bound.vars().iter().map(|v| grads.get_or_zeros(*v)).collect();
            if let Some(c) = config.clip_norm {
                clip_global_norm(&mut g, c);
            }
            if !g.iter().all(|t| t.iter().all(|v| v.is_finite())) {
                return Err(Error::Divergence(format!("non-finite gradient at epoch {epoch}, batch {i}")));
            }
            let pred_values = pred.to_tensor();
            drop(tape);
            current.optimizer.update(&mut current.model.store, &g, lr);
            sums.add(&data.denormalize(&pred_values), &batch.targets);
            current.batch_index += 1;
        }
        epochs_run = epoch;
        current.epoch = epoch;
        let train_report = sums.report(data.factor);
        let val = evaluate(&current.model, data, SplitName::Validation, config.batch)?;
        log::info!(
            "epoch {epoch}: lr {lr:.3e} p_i {p_last:.6} train MAE {:.4} validation MAE {:.4}",
            train_report.mae,
            val.mae
        );
        for (split, r) in [(SplitName::Train, &train_report), (SplitName::Validation, &val)] {
            history.push(MetricRow {
                epoch,
                split,
                factor: data.factor,
                mae: r.mae,
                rmse: r.rmse,
                lr,
                p_i: p_last,
            });
        }

        if current.best.is_none_or(|b| val.mae < b) {
            current.best = Some(val.mae);
            best = Some(checkpoint_of(config, data, &current));
            stale = 0;
        } else {
            stale += 1;
        }
        let first = *first_train_mae.get_or_insert(train_report.mae);
        if let Some(ratio) = config.target_train_ratio {
            if train_report.mae < ratio * first {
                stop = StopReason::TargetReached;
                break;
            }
        }
        if stale >= config.early_stop_patience {
            stop = StopReason::EarlyStopped;
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch ran"),
        history,
        sampling_log,
        epochs_run,
        stop,
    })
}
