//! Seeded desk-scale datasets written in the same formats as real data.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMeta, CALIBRATION_FILE, CSV_FILE, FORMAT_VERSION, NPY_FILE, TILE_DIR};
use crate::error::{Error, Result};
use crate::geo::{BBox, GridGeometry, Region};
use crate::numerical::{StationSeries, FACTOR_NAMES, STATIC_NAMES};
use crate::satellite::{Band, CalibrationTable, SatelliteTile, MAX_COUNT, MIN_COUNT};

const RESOLUTION: f64 = 0.02;
const CENTRE_LAT: f64 = 30.0;
const CENTRE_LON: f64 = 110.0;
const TBB_WARM: f64 = 330.0;
const TBB_COLD: f64 = 180.0;
const DOWNSAMPLE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub stations: usize,
    pub hours: usize,
    /// Channels per station including the three static ones.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Standard deviation of the observation noise, in units of each factor.
    pub noise: f64,
}

impl SynthConfig {
    /// The overfit fixture: 8 stations, 5 channels, 16×16×2 frames, 500 hours.
    pub fn micro(seed: u64) -> Self {
        Self {
            seed,
            stations: 8,
            hours: 500,
            channels: 5,
            height: 16,
            width: 16,
            bands: 2,
            noise: 0.02,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stations == 0 || self.hours == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("synthetic sizes must be at least 1".into()));
        }
        if self.channels <= STATIC_NAMES.len() || self.channels > FACTOR_NAMES.len() + STATIC_NAMES.len() {
            return Err(Error::Config(format!("channels must be in 4..=23, got {}", self.channels)));
        }
        if self.bands == 0 || self.bands > Band::ALL.len() {
            return Err(Error::Config(format!("bands must be in 1..=6, got {}", self.bands)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Factor columns used for `count` factors: the three forecast targets first.
pub fn synthetic_factors(count: usize) -> Vec<String> {
    let lead = ["temperature", "relative_humidity", "horizontal_visibility_1min"];
    lead.iter()
        .copied()
        .chain(FACTOR_NAMES.iter().copied().filter(|f| !lead.contains(f)))
        .take(count)
        .map(str::to_string)
        .collect()
}

pub fn synthetic_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2017, 1, 1).expect("valid").and_hms_opt(0, 0, 0).expect("valid")
}

pub fn synthetic_calibration() -> CalibrationTable {
    CalibrationTable::linear(TBB_WARM, TBB_COLD, 64)
}

fn kelvin_to_count(k: f64) -> u16 {
    let c = 1.0 + (TBB_WARM - k) * (MAX_COUNT - MIN_COUNT) as f64 / (TBB_WARM - TBB_COLD);
    c.round().clamp(MIN_COUNT as f64, MAX_COUNT as f64) as u16
}

struct Station {
    lat: f64,
    lon: f64,
    altitude: f64,
    offset: f64,
    phase: f64,
}

fn diurnal(t: f64, phase: f64) -> f64 {
    (TAU * (t - 9.0 + phase) / 24.0).sin()
}

fn synoptic(t: f64) -> f64 {
    (TAU * t / 120.0).sin()
}

/// Everything the synthesizer writes, before it touches the disk.
pub struct Synthetic {
    pub meta: DatasetMeta,
    pub series: StationSeries,
    /// `tiles[t][b]`
    pub tiles: Vec<Vec<SatelliteTile>>,
    pub calibration: CalibrationTable,
}

pub fn generate(cfg: &SynthConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = cfg.height * DOWNSAMPLE;
    let cols = cfg.width * DOWNSAMPLE;
    if rows != cols {
        return Err(Error::Config("synthetic frames must be square".into()));
    }
    let grid = GridGeometry {
        north: CENTRE_LAT + RESOLUTION * rows as f64 / 2.0,
        west: CENTRE_LON - RESOLUTION * cols as f64 / 2.0,
        resolution: RESOLUTION,
        rows,
        cols,
    };
    let vision_bbox = grid.bbox();
    let lat_margin = (vision_bbox.lat_max - vision_bbox.lat_min) / 4.0;
    let lon_margin = (vision_bbox.lon_max - vision_bbox.lon_min) / 4.0;
    let station_bbox = BBox::new(
        vision_bbox.lat_min + lat_margin,
        vision_bbox.lat_max - lat_margin,
        vision_bbox.lon_min + lon_margin,
        vision_bbox.lon_max - lon_margin,
    )?;

    let stations: Vec<Station> = (0..cfg.stations)
        .map(|_| {
            let lat = rng.random_range(station_bbox.lat_min..station_bbox.lat_max);
            let lon = rng.random_range(station_bbox.lon_min..station_bbox.lon_max);
            let rel = (lon - station_bbox.lon_min) / (station_bbox.lon_max - station_bbox.lon_min);
            Station {
                lat,
                lon,
                altitude: rng.random_range(0.0..500.0),
                offset: rng.random_range(-2.0..2.0),
                phase: 2.0 * rel - 1.0,
            }
        })
        .collect();

    let factors = synthetic_factors(cfg.channels - STATIC_NAMES.len());
    let noise = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut values = Array3::zeros((cfg.hours, cfg.stations, cfg.channels));
    let generic: Vec<(f64, f64, f64)> = (3..factors.len())
        .map(|_| (rng.random_range(-5.0..5.0), rng.random_range(0.5..3.0), rng.random_range(0.0..24.0)))
        .collect();
    for t in 0..cfg.hours {
        let tf = t as f64;
        for (n, s) in stations.iter().enumerate() {
            let temp = 15.0 + s.offset + 6.0 * diurnal(tf, s.phase) + 2.0 * synoptic(tf);
            for (c, name) in factors.iter().enumerate() {
                let clean = match name.as_str() {
                    "temperature" => temp,
                    "relative_humidity" => 65.0 - 2.5 * (temp - 15.0 - s.offset),
                    "horizontal_visibility_1min" => 20.0 + 4.0 * diurnal(tf, s.phase + 3.0) - 3.0 * synoptic(tf),
                    _ => {
                        let (a, b, p) = generic[c - 3];
                        a + b * diurnal(tf, p)
                    }
                };
                let eps = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                values[[t, n, c]] = clean + eps;
            }
            let base = factors.len();
            values[[t, n, base]] = s.lat;
            values[[t, n, base + 1]] = s.lon;
            values[[t, n, base + 2]] = s.altitude;
        }
    }

    let mut columns = factors;
    columns.extend(STATIC_NAMES.iter().map(|s| s.to_string()));
    let start = synthetic_start();
    let station_ids: Vec<String> = (0..cfg.stations).map(|i| format!("S{:03}", i + 1)).collect();
    let series = StationSeries::new(start, station_ids.clone(), columns.clone(), values)?;

    let bands: Vec<Band> = Band::ALL[..cfg.bands].to_vec();
    let mut tiles = Vec::with_capacity(cfg.hours);
    for t in 0..cfg.hours {
        let tf = t as f64;
        let hour_tiles = bands
            .iter()
            .enumerate()
            .map(|(b, &band)| {
                let counts = Array2::from_shape_fn((rows, cols), |(i, j)| {
                    let x = j as f64 / cols as f64;
                    let y = i as f64 / rows as f64;
                    let k = 280.0 - 3.0 * b as f64
                        + 8.0 * diurnal(tf, 2.0 * x - 1.0)
                        + 3.0 * synoptic(tf)
                        + 5.0 * (TAU * (1.5 * x + tf / 48.0)).sin() * (TAU * y).cos()
                        + 0.3 * noise_at(&mut rng);
                    kelvin_to_count(k)
                });
                SatelliteTile::new(band, counts)
            })
            .collect::<Result<Vec<_>>>()?;
        tiles.push(hour_tiles);
    }

    let meta = DatasetMeta {
        format_version: FORMAT_VERSION,
        region: Region::Synthetic,
        start,
        hours: cfg.hours,
        stations: station_ids,
        columns,
        bands,
        grid,
        station_bbox,
        vision_bbox,
        downsample: DOWNSAMPLE,
        height: cfg.height,
        width: cfg.width,
    };
    Ok(Synthetic {
        meta,
        series,
        tiles,
        calibration: synthetic_calibration(),
    })
}

fn noise_at(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0..1.0)
}

/// Generates and writes a dataset under `out`.
pub fn synthesize_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetMeta> {
    let data = generate(cfg)?;
    fs::create_dir_all(out.join(TILE_DIR))?;
    data.meta.write(out)?;
    let csv = fs::File::create(out.join(CSV_FILE))?;
    data.series.write_csv(std::io::BufWriter::new(csv))?;
    data.series.write_npy(&out.join(NPY_FILE))?;
    fs::write(out.join(CALIBRATION_FILE), data.calibration.to_text())?;
    for (t, hour) in data.tiles.iter().enumerate() {
        let stamp = data.meta.timestamp(t);
        for tile in hour {
            fs::write(out.join(TILE_DIR).join(tile.band.file_name(stamp)), tile.to_bytes(true)?)?;
        }
    }
    Ok(data.meta)
}
