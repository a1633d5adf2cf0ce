//! Data plumbing: satellite tiles, station series, splits and synthetic data.

pub mod dataset;
mod error;
pub mod geo;
pub mod numerical;
pub mod satellite;
pub mod synth;
pub mod vision;

pub use dataset::{materialize_vision, Dataset, DatasetMeta, NumericalFormat};
pub use error::{Error, Result};
pub use geo::{build_vision_window, BBox, GridGeometry, Region, VisionWindow};
pub use numerical::{
    load_numerical_dataset, window_count, DatasetSplit, NormStats, NumericalData, NumericalWindow, SplitDates, SplitName,
    StationSeries, TargetFactor,
};
pub use satellite::{parse_satellite_tile, Band, CalibrationTable, SatelliteTile};
pub use synth::{synthesize_dataset, SynthConfig};
pub use vision::{VisionFrames, VisionStats};
