//! On-disk dataset layout.
//!
//! ```text
//! <root>/meta.json          DatasetMeta
//! <root>/numerical.csv      long-format station table
//! <root>/numerical.npy      same values, T × N × D f64
//! <root>/calibration.txt    count → kelvin table
//! <root>/tiles/*.bz2        raw gridded tiles, one per band per hour
//! <root>/vision/*.npy       processed frames H × W × C f32 (written by ingest)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{build_frame, BBox, GridGeometry, Region};
use crate::numerical::StationSeries;
use crate::satellite::{decode_tile, Band, CalibrationTable};
use crate::vision::{read_frame, write_frame, VisionFrames};

pub const FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";
pub const CSV_FILE: &str = "numerical.csv";
pub const NPY_FILE: &str = "numerical.npy";
pub const CALIBRATION_FILE: &str = "calibration.txt";
pub const TILE_DIR: &str = "tiles";
pub const VISION_DIR: &str = "vision";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericalFormat {
    Csv,
    Npy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub region: Region,
    pub start: NaiveDateTime,
    pub hours: usize,
    pub stations: Vec<String>,
    pub columns: Vec<String>,
    pub bands: Vec<Band>,
    pub grid: GridGeometry,
    pub station_bbox: BBox,
    pub vision_bbox: BBox,
    pub downsample: usize,
    /// Processed frame size.
    pub height: usize,
    pub width: usize,
}

impl DatasetMeta {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|source| Error::File { path, source })?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported dataset version {}", meta.format_version)));
        }
        Ok(meta)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(root.join(META_FILE), text)?;
        Ok(())
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + chrono::Duration::hours(t as i64)
    }

    pub fn frame_name(&self, t: usize) -> String {
        format!("{}.npy", self.timestamp(t).format("%Y%m%d%H%M"))
    }
}

/// Loaded station series plus vision frames.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub series: StationSeries,
    pub vision: VisionFrames,
}

impl Dataset {
    /// Opens `root`, reading the numerical table in `format` (CSV when it
    /// exists and no format is given) and vision frames from `vision/`, or
    /// straight from the raw tiles when no processed frames exist.
    pub fn open(root: &Path, format: Option<NumericalFormat>) -> Result<Self> {
        let meta = DatasetMeta::read(root)?;
        let format = format.unwrap_or(if root.join(CSV_FILE).exists() {
            NumericalFormat::Csv
        } else {
            NumericalFormat::Npy
        });
        let series = match format {
            NumericalFormat::Csv => StationSeries::read_csv_file(&root.join(CSV_FILE))?,
            NumericalFormat::Npy => StationSeries::read_npy(&root.join(NPY_FILE), meta.start, meta.stations.clone(), meta.columns.clone())?,
        };
        if series.start != meta.start || series.stations != meta.stations || series.columns != meta.columns {
            return Err(Error::Invalid("numerical table disagrees with meta.json".into()));
        }
        if series.hours() != meta.hours {
            return Err(Error::Invalid(format!("meta.json declares {} hours, table has {}", meta.hours, series.hours())));
        }
        let vision = if root.join(VISION_DIR).is_dir() {
            load_processed(root, &meta)?
        } else {
            frames_from_tiles(root, &meta)?
        };
        Ok(Self {
            root: root.to_path_buf(),
            meta,
            series,
            vision,
        })
    }
}

fn load_processed(root: &Path, meta: &DatasetMeta) -> Result<VisionFrames> {
    let dir = root.join(VISION_DIR);
    let frames = (0..meta.hours)
        .map(|t| {
            let p = dir.join(meta.frame_name(t));
            if p.exists() {
                read_frame(&p).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    VisionFrames::new(meta.height, meta.width, meta.bands.len(), frames)
}

/// Builds every hour's frame from `tiles/`; an hour missing any band is absent.
pub fn frames_from_tiles(root: &Path, meta: &DatasetMeta) -> Result<VisionFrames> {
    let calib_path = root.join(CALIBRATION_FILE);
    let text = fs::read_to_string(&calib_path).map_err(|source| Error::File { path: calib_path, source })?;
    let calib = CalibrationTable::parse(&text)?;
    let lut = calib.dense();
    if meta.grid.rows != meta.grid.cols {
        return Err(Error::Config("tiles must be square".into()));
    }
    let tiles = root.join(TILE_DIR);
    let mut frames = Vec::with_capacity(meta.hours);
    for t in 0..meta.hours {
        let stamp = meta.timestamp(t);
        let mut planes = Vec::with_capacity(meta.bands.len());
        for &band in &meta.bands {
            let p = tiles.join(band.file_name(stamp));
            if !p.exists() {
                break;
            }
            let raw = fs::read(&p).map_err(|source| Error::File { path: p.clone(), source })?;
            let tile = decode_tile(&raw, meta.grid.rows, band)?;
            planes.push(tile.counts.mapv(|c| lut[(c - 1) as usize]));
        }
        if planes.len() < meta.bands.len() {
            frames.push(None);
            continue;
        }
        let frame = build_frame(&planes, &meta.grid, &meta.vision_bbox, meta.downsample)?;
        frames.push(Some(frame.mapv(|v| v as f32)));
    }
    VisionFrames::new(meta.height, meta.width, meta.bands.len(), frames)
}

/// Converts raw tiles to processed frames under `vision/`. Returns the number
/// of frames written.
pub fn materialize_vision(root: &Path) -> Result<usize> {
    let meta = DatasetMeta::read(root)?;
    let frames = frames_from_tiles(root, &meta)?;
    let dir = root.join(VISION_DIR);
    fs::create_dir_all(&dir)?;
    let mut written = 0;
    for (t, f) in frames.frames.iter().enumerate() {
        if let Some(f) = f {
            write_frame(&dir.join(meta.frame_name(t)), f)?;
            written += 1;
        }
    }
    Ok(written)
}
