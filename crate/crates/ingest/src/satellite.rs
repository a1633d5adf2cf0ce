//! Gridded infrared tiles: big-endian 16-bit counts, optionally bz2-packed,
//! mapped to brightness temperature through a calibration table.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use bzip2::read::BzDecoder;
use bzip2::write::BzEncoder;
use bzip2::Compression;
use chrono::NaiveDateTime;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_COUNT: u16 = 1;
pub const MAX_COUNT: u16 = 4096;
/// Side of a full-disk gridded tile.
pub const FULL_DISK_SIDE: usize = 6000;

const BZ2_MAGIC: &[u8] = b"BZh";

/// The six infrared bands, named by imager band number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    B11,
    B12,
    B13,
    B14,
    B15,
    B16,
}

impl Band {
    pub const ALL: [Band; 6] = [Band::B11, Band::B12, Band::B13, Band::B14, Band::B15, Band::B16];

    /// Number used by the gridded archive (`tir.NN`).
    pub fn tir_number(self) -> u8 {
        match self {
            Band::B11 => 9,
            Band::B12 => 10,
            Band::B13 => 1,
            Band::B14 => 2,
            Band::B15 => 3,
            Band::B16 => 4,
        }
    }

    pub fn from_tir_number(n: u8) -> Option<Band> {
        Band::ALL.into_iter().find(|b| b.tir_number() == n)
    }

    pub fn wavelength_um(self) -> f64 {
        match self {
            Band::B11 => 8.6,
            Band::B12 => 9.6,
            Band::B13 => 10.4,
            Band::B14 => 11.2,
            Band::B15 => 12.4,
            Band::B16 => 13.3,
        }
    }

    /// Archive file name for the tile at `stamp`.
    pub fn file_name(self, stamp: NaiveDateTime) -> String {
        format!("{}.tir.{:02}.fld.geoss.bz2", stamp.format("%Y%m%d%H%M"), self.tir_number())
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Band {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        Band::ALL
            .into_iter()
            .find(|b| format!("{b:?}") == t || format!("TIR{:02}", b.tir_number()) == t)
            .ok_or_else(|| Error::Config(format!("unknown band {s}")))
    }
}

/// Count → brightness temperature map. Listed counts are strictly
/// increasing; counts between rows are linearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    counts: Vec<u16>,
    kelvin: Vec<f64>,
}

impl CalibrationTable {
    pub fn new(rows: Vec<(u16, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Calibration("empty table".into()));
        }
        for w in rows.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Calibration(format!("counts not ascending at {}", w[1].0)));
            }
        }
        if rows[0].0 > MIN_COUNT || rows[rows.len() - 1].0 < MAX_COUNT {
            return Err(Error::Calibration(format!(
                "table covers {}..={}, need {MIN_COUNT}..={MAX_COUNT}",
                rows[0].0,
                rows[rows.len() - 1].0
            )));
        }
        if let Some((c, k)) = rows.iter().find(|(_, k)| !k.is_finite()) {
            return Err(Error::Calibration(format!("non-finite value {k} at count {c}")));
        }
        let (counts, kelvin) = rows.into_iter().unzip();
        Ok(Self { counts, kelvin })
    }

    /// `Tbb[c] = c` kelvin.
    pub fn identity() -> Self {
        Self::new(vec![(MIN_COUNT, MIN_COUNT as f64), (MAX_COUNT, MAX_COUNT as f64)]).expect("valid")
    }

    /// Linear ramp from `first` kelvin at count 1 to `last` at 4096, listed every `step` counts.
    pub fn linear(first: f64, last: f64, step: u16) -> Self {
        let slope = (last - first) / (MAX_COUNT - MIN_COUNT) as f64;
        let mut rows: Vec<(u16, f64)> = (MIN_COUNT..=MAX_COUNT)
            .step_by(step.max(1) as usize)
            .map(|c| (c, first + slope * (c - MIN_COUNT) as f64))
            .collect();
        if rows.last().map(|r| r.0) != Some(MAX_COUNT) {
            rows.push((MAX_COUNT, last));
        }
        Self::new(rows).expect("valid ramp")
    }

    /// Parses two whitespace-separated columns; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split_whitespace();
            let (Some(c), Some(k), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(Error::Calibration(format!("line {}: expected two columns", n + 1)));
            };
            let c: u16 = c
                .parse()
                .map_err(|e| Error::Calibration(format!("line {}: count {c}: {e}", n + 1)))?;
            let k: f64 = k
                .parse()
                .map_err(|e| Error::Calibration(format!("line {}: value {k}: {e}", n + 1)))?;
            rows.push((c, k));
        }
        Self::new(rows)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# count tbb_kelvin\n");
        for (c, k) in self.counts.iter().zip(&self.kelvin) {
            out.push_str(&format!("{c} {k}\n"));
        }
        out
    }

    pub fn kelvin(&self, count: u16) -> f64 {
        match self.counts.binary_search(&count) {
            Ok(i) => self.kelvin[i],
            Err(i) => {
                let (c0, c1) = (self.counts[i - 1] as f64, self.counts[i] as f64);
                let (k0, k1) = (self.kelvin[i - 1], self.kelvin[i]);
                k0 + (k1 - k0) * (count as f64 - c0) / (c1 - c0)
            }
        }
    }

    /// Full 4096-entry lookup, index `count - 1`.
    pub fn dense(&self) -> Vec<f64> {
        (MIN_COUNT..=MAX_COUNT).map(|c| self.kelvin(c)).collect()
    }
}

/// Raw counts of one band.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteTile {
    pub band: Band,
    pub counts: Array2<u16>,
}

impl SatelliteTile {
    pub fn new(band: Band, counts: Array2<u16>) -> Result<Self> {
        validate_counts(counts.iter().copied())?;
        Ok(Self { band, counts })
    }

    /// Row-major big-endian payload, bz2-compressed when `compress` is set.
    pub fn to_bytes(&self, compress: bool) -> Result<Vec<u8>> {
        let mut raw = Vec::with_capacity(self.counts.len() * 2);
        for &c in self.counts.iter() {
            raw.extend_from_slice(&c.to_be_bytes());
        }
        if !compress {
            return Ok(raw);
        }
        let mut enc = BzEncoder::new(Vec::new(), Compression::best());
        enc.write_all(&raw)?;
        Ok(enc.finish()?)
    }

    pub fn calibrate(&self, calib: &CalibrationTable) -> Array2<f64> {
        let lut = calib.dense();
        self.counts.mapv(|c| lut[(c - MIN_COUNT) as usize])
    }
}

fn validate_counts(counts: impl Iterator<Item = u16>) -> Result<()> {
    for (index, count) in counts.enumerate() {
        if !(MIN_COUNT..=MAX_COUNT).contains(&count) {
            return Err(Error::CorruptTile { index, count });
        }
    }
    Ok(())
}

pub fn is_bz2(raw: &[u8]) -> bool {
    raw.len() >= 4 && raw.starts_with(BZ2_MAGIC) && (b'1'..=b'9').contains(&raw[3])
}

/// Decodes a `side × side` tile from raw or bz2-compressed bytes.
pub fn decode_tile(raw: &[u8], side: usize, band: Band) -> Result<SatelliteTile> {
    let inflated;
    let payload = if is_bz2(raw) {
        let mut buf = Vec::new();
        BzDecoder::new(raw)
            .read_to_end(&mut buf)
            .map_err(|e| Error::Decompression(e.to_string()))?;
        inflated = buf;
        &inflated[..]
    } else {
        raw
    };
    let expected = 2 * side * side;
    if payload.len() != expected {
        return Err(Error::Length {
            expected,
            actual: payload.len(),
        });
    }
    let words: Vec<u16> = payload.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    validate_counts(words.iter().copied())?;
    let counts = Array2::from_shape_vec((side, side), words).expect("length checked");
    Ok(SatelliteTile { band, counts })
}

/// Decodes and calibrates a tile to kelvin.
pub fn parse_satellite_tile(raw: &[u8], side: usize, band: Band, calib: &CalibrationTable) -> Result<Array2<f64>> {
    Ok(decode_tile(raw, side, band)?.calibrate(calib))
}
