//! Hourly station series: CSV/NPY loading, gap filling, splits, z-scores and
//! sliding windows.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime, Timelike};
use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The twenty meteorological factors, in storage order.
pub const FACTOR_NAMES: [&str; 20] = [
    "air_pressure",
    "water_vapor_pressure",
    "temperature",
    "max_temperature",
    "min_temperature",
    "dew_point",
    "land_surface_temperature",
    "relative_humidity",
    "wind_speed",
    "max_wind_speed",
    "wind_direction",
    "max_wind_direction",
    "vertical_visibility",
    "horizontal_visibility_1min",
    "horizontal_visibility_10min",
    "precipitation_1h",
    "precipitation_3h",
    "precipitation_6h",
    "precipitation_12h",
    "precipitation_24h",
];

/// Per-station constants appended after the factors.
pub const STATIC_NAMES: [&str; 3] = ["latitude", "longitude", "altitude"];

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
pub const MAX_FILL_HOURS: usize = 3;
const STD_FLOOR: f64 = 1e-8;

/// Forecast targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFactor {
    Temperature,
    RelativeHumidity,
    Visibility,
}

impl TargetFactor {
    pub const ALL: [TargetFactor; 3] = [TargetFactor::Temperature, TargetFactor::RelativeHumidity, TargetFactor::Visibility];

    pub fn column_name(self) -> &'static str {
        match self {
            TargetFactor::Temperature => "temperature",
            TargetFactor::RelativeHumidity => "relative_humidity",
            TargetFactor::Visibility => "horizontal_visibility_1min",
        }
    }
}

impl fmt::Display for TargetFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetFactor::Temperature => "temperature",
            TargetFactor::RelativeHumidity => "relative_humidity",
            TargetFactor::Visibility => "visibility",
        })
    }
}

impl FromStr for TargetFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temperature" => Ok(TargetFactor::Temperature),
            "relative_humidity" => Ok(TargetFactor::RelativeHumidity),
            "visibility" => Ok(TargetFactor::Visibility),
            _ => Err(Error::Config(format!(
                "unknown factor {s}; expected temperature, relative_humidity or visibility"
            ))),
        }
    }
}

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .map_err(|e| Error::Invalid(format!("timestamp {s}: {e}")))
}

/// Hourly grid of station observations. Missing cells are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSeries {
    pub start: NaiveDateTime,
    pub stations: Vec<String>,
    /// Factor names followed by the three static channels.
    pub columns: Vec<String>,
    /// `T × N × D`
    pub values: Array3<f64>,
}

impl StationSeries {
    pub fn new(start: NaiveDateTime, stations: Vec<String>, columns: Vec<String>, values: Array3<f64>) -> Result<Self> {
        let (_, n, d) = values.dim();
        if n != stations.len() || d != columns.len() {
            return Err(Error::Invalid(format!(
                "values {:?} do not match {} stations and {} columns",
                values.dim(),
                stations.len(),
                columns.len()
            )));
        }
        if d <= STATIC_NAMES.len() {
            return Err(Error::Invalid(format!("need at least one factor besides the static channels, got {d} columns")));
        }
        if columns[d - 3..] != STATIC_NAMES {
            return Err(Error::Invalid(format!("last three columns must be {STATIC_NAMES:?}")));
        }
        if start.minute() != 0 || start.second() != 0 {
            return Err(Error::Invalid(format!("series start {start} is not on the hour")));
        }
        Ok(Self {
            start,
            stations,
            columns,
            values,
        })
    }

    pub fn hours(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_factors(&self) -> usize {
        self.columns.len() - STATIC_NAMES.len()
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::hours(t as i64)
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn target_column(&self, target: TargetFactor) -> Result<usize> {
        self.column(target.column_name())
            .ok_or_else(|| Error::Config(format!("dataset has no {} column", target.column_name())))
    }

    /// Long-format CSV: `station_id,timestamp,<columns>`; missing values are empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["station_id".to_string(), "timestamp".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.hours() {
            let stamp = self.timestamp(t).format(TIMESTAMP_FORMAT).to_string();
            for (n, id) in self.stations.iter().enumerate() {
                let mut row = vec![id.clone(), stamp.clone()];
                row.extend(self.values.slice(s![t, n, ..]).iter().map(|v| if v.is_finite() { v.to_string() } else { String::new() }));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the long-format CSV. Stations keep first-appearance order; the
    /// hourly grid spans the earliest to the latest timestamp.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "station_id" || &header[1] != "timestamp" {
            return Err(Error::Invalid("CSV header must start with station_id,timestamp".into()));
        }
        let columns: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let d = columns.len();
        let mut stations: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut last: Vec<NaiveDateTime> = Vec::new();
        let mut rows: Vec<(usize, NaiveDateTime, Vec<f64>)> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != d + 2 {
                return Err(Error::Invalid(format!("row {}: expected {} fields, got {}", line + 2, d + 2, rec.len())));
            }
            let stamp = parse_timestamp(&rec[1])?;
            if stamp.minute() != 0 || stamp.second() != 0 {
                return Err(Error::Invalid(format!("row {}: {stamp} is not on the hour", line + 2)));
            }
            let n = *index.entry(rec[0].to_string()).or_insert_with(|| {
                stations.push(rec[0].to_string());
                last.push(NaiveDateTime::MIN);
                stations.len() - 1
            });
            if stamp <= last[n] {
                return Err(Error::Ordering(format!("station {} goes from {} to {stamp}", rec[0].to_string(), last[n])));
            }
            last[n] = stamp;
            let values = rec
                .iter()
                .skip(2)
                .map(|f| {
                    let f = f.trim();
                    if f.is_empty() || f.eq_ignore_ascii_case("nan") {
                        Ok(f64::NAN)
                    } else {
                        f.parse::<f64>().map_err(|e| Error::Invalid(format!("row {}: {f}: {e}", line + 2)))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push((n, stamp, values));
        }
        let start = rows.iter().map(|r| r.1).min().ok_or_else(|| Error::Invalid("CSV has no rows".into()))?;
        let end = rows.iter().map(|r| r.1).max().expect("non-empty");
        let hours = (end - start).num_hours() as usize + 1;
        let mut values = Array3::from_elem((hours, stations.len(), d), f64::NAN);
        for (n, stamp, v) in rows {
            let t = (stamp - start).num_hours() as usize;
            values.slice_mut(s![t, n, ..]).assign(&ndarray::Array1::from(v));
        }
        Self::new(start, stations, columns, values)
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_csv(std::io::BufReader::new(f))
    }

    /// NPY array `T × N × D` of f64; the sidecar metadata supplies names and start.
    pub fn read_npy(path: &Path, start: NaiveDateTime, stations: Vec<String>, columns: Vec<String>) -> Result<Self> {
        let values: Array3<f64> = ndarray_npy::read_npy(path)?;
        Self::new(start, stations, columns, values)
    }

    pub fn write_npy(&self, path: &Path) -> Result<()> {
        ndarray_npy::write_npy(path, &self.values)?;
        Ok(())
    }
}

/// Forward-fills runs of at most `max_fill` missing hours per station and
/// channel; returns which hours are complete afterwards.
pub fn fill_gaps(values: &mut Array3<f64>, max_fill: usize) -> Vec<bool> {
    let (t_total, n, d) = values.dim();
    for i in 0..n {
        for c in 0..d {
            let mut series = values.slice_mut(s![.., i, c]);
            let mut t = 0;
            while t < t_total {
                if series[t].is_finite() {
                    t += 1;
                    continue;
                }
                let run_start = t;
                while t < t_total && !series[t].is_finite() {
                    t += 1;
                }
                if run_start > 0 && t - run_start <= max_fill {
                    let fill = series[run_start - 1];
                    series.slice_mut(s![run_start..t]).fill(fill);
                }
            }
        }
    }
    values
        .outer_iter()
        .map(|hour| hour.iter().all(|v| v.is_finite()))
        .collect()
}

/// Split boundaries by calendar date; each end date is inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDates {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub validation_end: NaiveDate,
    pub test_end: NaiveDate,
}

impl SplitDates {
    /// Chronological split of the observational corpus.
    pub fn observational() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
        Self {
            train_start: d(2017, 1, 1),
            train_end: d(2019, 8, 31),
            validation_end: d(2020, 8, 31),
            test_end: d(2021, 8, 31),
        }
    }
}

/// Contiguous, ordered, disjoint hour ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        })
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split {s}"))),
        }
    }
}

impl DatasetSplit {
    pub fn new(train: Range<usize>, validation: Range<usize>, test: Range<usize>) -> Result<Self> {
        if train.start > train.end || train.end != validation.start || validation.end != test.start || validation.start > validation.end || test.start > test.end {
            return Err(Error::Config(format!("splits {train:?} {validation:?} {test:?} are not contiguous and ordered")));
        }
        Ok(Self { train, validation, test })
    }

    /// Ranges of a series starting at `start` with `hours` steps.
    pub fn from_dates(start: NaiveDateTime, hours: usize, dates: &SplitDates) -> Result<Self> {
        let index = |d: NaiveDate| -> usize {
            let h = (d.and_hms_opt(0, 0, 0).expect("midnight") - start).num_hours();
            h.clamp(0, hours as i64) as usize
        };
        let one = chrono::Days::new(1);
        let train = index(dates.train_start)..index(dates.train_end + one);
        let validation = train.end..index(dates.validation_end + one);
        let test = validation.end..index(dates.test_end + one);
        Self::new(train, validation, test)
    }

    /// Leading `train` and following `validation` fractions; the rest is test.
    pub fn from_fractions(hours: usize, train: f64, validation: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train) || !(0.0..=1.0).contains(&validation) || train + validation > 1.0 {
            return Err(Error::Config(format!("bad split fractions {train} / {validation}")));
        }
        let a = (hours as f64 * train).round() as usize;
        let b = (hours as f64 * (train + validation)).round() as usize;
        Self::new(0..a, a..b.min(hours), b.min(hours)..hours)
    }

    pub fn range(&self, split: SplitName) -> Range<usize> {
        match split {
            SplitName::Train => self.train.clone(),
            SplitName::Validation => self.validation.clone(),
            SplitName::Test => self.test.clone(),
        }
    }
}

/// `L − T_h − T_p + 1` windows fit in a length-`L` series, or none.
pub fn window_count(len: usize, t_h: usize, t_p: usize) -> usize {
    (len + 1).saturating_sub(t_h + t_p)
}

/// Start indices of windows lying inside `range` whose hours are all valid.
pub fn window_starts(range: Range<usize>, valid: &[bool], t_h: usize, t_p: usize) -> Vec<usize> {
    let span = t_h + t_p;
    let end = range.end.min(valid.len());
    if span == 0 || range.start >= end || end - range.start < span {
        return Vec::new();
    }
    let mut bad = vec![0usize; valid.len() + 1];
    for (t, &ok) in valid.iter().enumerate() {
        bad[t + 1] = bad[t] + usize::from(!ok);
    }
    (range.start..=end - span).filter(|&s| bad[s + span] == bad[s]).collect()
}

/// Per-channel z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Statistics of the finite values in hours `range`; near-zero spread is
    /// replaced by 1 so constant channels map to zero.
    pub fn fit(values: ArrayView3<'_, f64>, range: Range<usize>) -> Result<Self> {
        let d = values.dim().2;
        let part = values.slice(s![range.clone(), .., ..]);
        let mut mean = Vec::with_capacity(d);
        let mut std = Vec::with_capacity(d);
        for c in 0..d {
            let col: Vec<f64> = part.slice(s![.., .., c]).iter().copied().filter(|v| v.is_finite()).collect();
            if col.is_empty() {
                return Err(Error::Invalid(format!("channel {c} has no finite training values in {range:?}")));
            }
            // shifted by the first value so a constant channel has an exact mean
            let x0 = col[0];
            let m = x0 + col.iter().map(|v| v - x0).sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64;
            let sd = var.sqrt();
            mean.push(m);
            std.push(if sd < STD_FLOOR { 1.0 } else { sd });
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, values: ArrayView3<'_, f64>) -> Array3<f64> {
        let mut out = values.to_owned();
        for (c, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
            lane.mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        out
    }

    pub fn denormalize(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// One input window in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericalWindow {
    pub stamps: Vec<NaiveDateTime>,
    /// `T_h × N × D`
    pub values: Array3<f64>,
}

/// Gap-filled, normalized series with window indices for each split.
#[derive(Debug, Clone)]
pub struct NumericalData {
    pub series: StationSeries,
    pub normalized: Array3<f64>,
    pub valid: Vec<bool>,
    pub stats: NormStats,
    pub split: DatasetSplit,
    pub t_h: usize,
    pub t_p: usize,
    pub target: usize,
}

impl NumericalData {
    pub fn window_starts(&self, split: SplitName) -> Vec<usize> {
        window_starts(self.split.range(split), &self.valid, self.t_h, self.t_p)
    }

    /// Input window starting at hour `start` and its physical-unit targets `T_p × N`.
    pub fn window(&self, start: usize) -> (NumericalWindow, Array2<f64>) {
        let end = start + self.t_h;
        let window = NumericalWindow {
            stamps: (start..end).map(|t| self.series.timestamp(t)).collect(),
            values: self.normalized.slice(s![start..end, .., ..]).to_owned(),
        };
        let target = self.series.values.slice(s![end..end + self.t_p, .., self.target]).to_owned();
        (window, target)
    }
}

/// Fills gaps, fits statistics on the training hours and indexes windows.
pub fn load_numerical_dataset(
    mut series: StationSeries,
    split: DatasetSplit,
    t_h: usize,
    t_p: usize,
    target: TargetFactor,
) -> Result<NumericalData> {
    if t_h == 0 || t_p == 0 {
        return Err(Error::Config("history and horizon must be at least 1".into()));
    }
    if split.test.end > series.hours() {
        return Err(Error::Config(format!("split ends at {} but series has {} hours", split.test.end, series.hours())));
    }
    let target = series.target_column(target)?;
    let valid = fill_gaps(&mut series.values, MAX_FILL_HOURS);
    let stats = NormStats::fit(series.values.view(), split.train.clone())?;
    let normalized = stats.normalize(series.values.view());
    Ok(NumericalData {
        series,
        normalized,
        valid,
        stats,
        split,
        t_h,
        t_p,
        target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stamp(h: i64) -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2017, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap() + Duration::hours(h)
    }

    fn columns(factors: &[&str]) -> Vec<String> {
        factors.iter().chain(STATIC_NAMES.iter()).map(|s| s.to_string()).collect()
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_count(24, 12, 12), 1);
        assert_eq!(window_count(30, 12, 12), 7);
        assert_eq!(window_count(23, 12, 12), 0);
        assert_eq!(window_starts(0..30, &[true; 30], 12, 12).len(), 7);
    }

    #[test]
    fn gaps_fill_up_to_three_hours() {
        let mut v = Array3::from_shape_fn((12, 1, 1), |(t, _, _)| t as f64);
        for t in [2, 3, 4] {
            v[[t, 0, 0]] = f64::NAN;
        }
        for t in 6..10 {
            v[[t, 0, 0]] = f64::NAN;
        }
        let valid = fill_gaps(&mut v, 3);
        assert_eq!(v[[4, 0, 0]], 1.0);
        assert!(v[[7, 0, 0]].is_nan());
        assert_eq!(valid.iter().filter(|&&b| !b).count(), 4);
        // windows touching hours 6..10 are dropped
        assert_eq!(window_starts(0..12, &valid, 1, 1), vec![0, 1, 2, 3, 4, 10]);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let v = Array3::from_shape_fn((5, 2, 2), |(t, n, c)| if c == 0 { 7.5 } else { (t + n) as f64 });
        let stats = NormStats::fit(v.view(), 0..5).unwrap();
        let z = stats.normalize(v.view());
        assert!(z.slice(s![.., .., 0]).iter().all(|&x| x == 0.0));
        assert!((stats.denormalize(1, z[[3, 1, 1]]) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_and_ordering() {
        let values = Array3::from_shape_fn((3, 2, 4), |(t, n, c)| (t * 100 + n * 10 + c) as f64 + 0.25);
        let s = StationSeries::new(stamp(5), vec!["a".into(), "b".into()], columns(&["temperature"]), values).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(StationSeries::read_csv(&buf[..]).unwrap(), s);

        let bad = "station_id,timestamp,temperature,latitude,longitude,altitude\n\
                   a,2017-01-01T02:00:00,1,1,1,1\na,2017-01-01T01:00:00,1,1,1,1\n";
        assert!(matches!(StationSeries::read_csv(bad.as_bytes()), Err(Error::Ordering(_))));
    }

    #[test]
    fn missing_csv_hours_become_nan() {
        let text = "station_id,timestamp,temperature,latitude,longitude,altitude\n\
                    a,2017-01-01T00:00:00,1,1,1,1\na,2017-01-01T03:00:00,4,1,1,1\nb,2017-01-01T01:00:00,,2,2,2\n";
        let s = StationSeries::read_csv(text.as_bytes()).unwrap();
        assert_eq!(s.values.dim(), (4, 2, 4));
        assert!(s.values[[1, 0, 0]].is_nan());
        assert!(s.values[[1, 1, 0]].is_nan());
        assert_eq!(s.values[[1, 1, 1]], 2.0);
    }

    #[test]
    fn observational_split_dates() {
        let start = stamp(0);
        let hours = (NaiveDate::from_ymd_opt(2021, 9, 1).unwrap().and_hms_opt(0, 0, 0).unwrap() - start).num_hours() as usize;
        let split = DatasetSplit::from_dates(start, hours, &SplitDates::observational()).unwrap();
        let at = |t: usize| start + Duration::hours(t as i64);
        assert_eq!(at(split.train.end - 1).to_string(), "2019-08-31 23:00:00");
        assert_eq!(at(split.validation.start).to_string(), "2019-09-01 00:00:00");
        assert_eq!(at(split.validation.end - 1).to_string(), "2020-08-31 23:00:00");
        assert_eq!(at(split.test.start).to_string(), "2020-09-01 00:00:00");
        assert_eq!(split.test.end, hours);
    }

    #[test]
    fn fractions() {
        let s = DatasetSplit::from_fractions(500, 0.7, 0.1).unwrap();
        assert_eq!((s.train, s.validation, s.test), (0..350, 350..400, 400..500));
        assert!(DatasetSplit::from_fractions(10, 0.8, 0.3).is_err());
    }

    #[test]
    fn factor_names() {
        assert_eq!("visibility".parse::<TargetFactor>().unwrap().column_name(), "horizontal_visibility_1min");
        assert_eq!(FACTOR_NAMES.len() + STATIC_NAMES.len(), 23);
        assert!("pressure".parse::<TargetFactor>().is_err());
    }
}
