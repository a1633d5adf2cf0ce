//! Windows of a loaded dataset turned into model-ready mini-batches.

use chrono::{Datelike, NaiveDateTime, Timelike};
use ndarray::{s, Array3, Array4, Array5, ArrayD, Axis};
use serde::{Deserialize, Serialize};
use vnnet_ingest::{
    load_numerical_dataset, Dataset, DatasetSplit, NumericalData, SplitDates, SplitName, TargetFactor, VisionFrames,
    VisionStats,
};

use crate::error::{Error, Result};
use crate::graph_core::CalendarIndex;

/// How the hourly series is cut into train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitConfig {
    /// Leading fractions of the series; the remainder is test.
    Fractions { train: f64, validation: f64 },
    /// Calendar boundaries.
    Dates(SplitDates),
}

impl SplitConfig {
    pub fn observational() -> Self {
        SplitConfig::Dates(SplitDates::observational())
    }

    pub fn resolve(&self, start: NaiveDateTime, hours: usize) -> Result<DatasetSplit> {
        Ok(match self {
            SplitConfig::Fractions { train, validation } => DatasetSplit::from_fractions(hours, *train, *validation)?,
            SplitConfig::Dates(d) => DatasetSplit::from_dates(start, hours, d)?,
        })
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self::observational()
    }
}

pub fn calendar_index(stamp: NaiveDateTime) -> CalendarIndex {
    CalendarIndex {
        month: stamp.month(),
        day: stamp.day(),
        hour: stamp.hour(),
    }
}

/// Frames and the training-split scaling applied to them.
#[derive(Debug, Clone)]
pub struct PreparedVision {
    pub frames: VisionFrames,
    pub stats: VisionStats,
}

/// Numerical and vision data ready for window sampling.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub numerical: NumericalData,
    pub vision: Option<PreparedVision>,
    pub calendar: Vec<CalendarIndex>,
    pub factor: TargetFactor,
}

/// One mini-batch of windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub starts: Vec<usize>,
    /// `[B, T_h, N, D]`, normalized
    pub numerical: ArrayD<f64>,
    /// `stamps[t][b]`
    pub stamps: Vec<Vec<CalendarIndex>>,
    /// `[B, T_h, C_s, H, W]` in `[0, 1]`
    pub vision: Option<ArrayD<f64>>,
    /// `[B, T_p, N, 1]`, normalized
    pub teacher: ArrayD<f64>,
    /// `[B, T_p, N]`, physical units
    pub targets: Array3<f64>,
}

impl PreparedData {
    pub fn new(
        dataset: Dataset,
        split: &SplitConfig,
        t_h: usize,
        t_p: usize,
        factor: TargetFactor,
        with_vision: bool,
    ) -> Result<Self> {
        let split = split.resolve(dataset.series.start, dataset.series.hours())?;
        let train = split.train.clone();
        let numerical = load_numerical_dataset(dataset.series, split, t_h, t_p, factor)?;
        let vision = if with_vision {
            let stats = dataset.vision.fit(train)?;
            Some(PreparedVision {
                frames: dataset.vision,
                stats,
            })
        } else {
            None
        };
        let calendar = (0..numerical.series.hours())
            .map(|t| calendar_index(numerical.series.timestamp(t)))
            .collect();
        Ok(Self {
            numerical,
            vision,
            calendar,
            factor,
        })
    }

    pub fn nodes(&self) -> usize {
        self.numerical.series.stations.len()
    }

    pub fn channels(&self) -> usize {
        self.numerical.series.columns.len()
    }

    pub fn t_h(&self) -> usize {
        self.numerical.t_h
    }

    pub fn t_p(&self) -> usize {
        self.numerical.t_p
    }

    /// Window starts of `split` whose numerical hours are all valid and, with
    /// vision enabled, whose input hours all have a frame.
    pub fn starts(&self, split: SplitName) -> Vec<usize> {
        let starts = self.numerical.window_starts(split);
        match &self.vision {
            None => starts,
            Some(v) => {
                let t_h = self.t_h();
                starts
                    .into_iter()
                    .filter(|&s| (s..s + t_h).all(|t| v.frames.get(t).is_some()))
                    .collect()
            }
        }
    }

    pub fn batch(&self, starts: &[usize]) -> Result<Batch> {
        if starts.is_empty() {
            return Err(Error::EmptyWindow);
        }
        let (t_h, t_p) = (self.t_h(), self.t_p());
        let (b, n, d) = (starts.len(), self.nodes(), self.channels());
        let target = self.numerical.target;
        let mut numerical = Array4::<f64>::zeros((b, t_h, n, d));
        let mut teacher = Array4::<f64>::zeros((b, t_p, n, 1));
        let mut targets = Array3::<f64>::zeros((b, t_p, n));
        for (i, &s) in starts.iter().enumerate() {
            numerical
                .slice_mut(s![i, .., .., ..])
                .assign(&self.numerical.normalized.slice(s![s..s + t_h, .., ..]));
            let future = s + t_h..s + t_h + t_p;
            teacher
                .slice_mut(s![i, .., .., 0])
                .assign(&self.numerical.normalized.slice(s![future.clone(), .., target]));
            targets
                .slice_mut(s![i, .., ..])
                .assign(&self.numerical.series.values.slice(s![future, .., target]));
        }
        let stamps = (0..t_h)
            .map(|t| starts.iter().map(|&s| self.calendar[s + t]).collect())
            .collect();
        let vision = match &self.vision {
            None => None,
            Some(v) => {
                let f = &v.frames;
                let mut out = Array5::<f64>::zeros((b, t_h, f.bands, f.height, f.width));
                for (i, &s) in starts.iter().enumerate() {
                    for t in 0..t_h {
                        let frame = f
                            .get(s + t)
                            .ok_or_else(|| Error::Config(format!("hour {} has no vision frame", s + t)))?;
                        let chw = v.stats.normalize(frame).permuted_axes([2, 0, 1]);
                        out.slice_mut(s![i, t, .., .., ..]).assign(&chw);
                    }
                }
                Some(out.into_dyn())
            }
        };
        Ok(Batch {
            starts: starts.to_vec(),
            numerical: numerical.into_dyn(),
            stamps,
            vision,
            teacher: teacher.into_dyn(),
            targets,
        })
    }

    /// Normalized forecasts `[B, T_p, N, 1]` back to physical units `[B, T_p, N]`.
    pub fn denormalize(&self, pred: &ArrayD<f64>) -> Array3<f64> {
        let target = self.numerical.target;
        let stats = &self.numerical.stats;
        pred.index_axis(Axis(3), 0)
            .mapv(|v| stats.denormalize(target, v))
            .into_dimensionality()
            .expect("rank 3")
    }
}
