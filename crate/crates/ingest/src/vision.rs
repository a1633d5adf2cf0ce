//! Hourly processed vision frames and their per-band scaling.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-band min/max used to scale frames into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl VisionStats {
    pub fn normalize(&self, frame: &Array3<f32>) -> Array3<f64> {
        let mut out = frame.mapv(f64::from);
        for (c, mut plane) in out.axis_iter_mut(Axis(2)).enumerate() {
            let span = self.max[c] - self.min[c];
            let span = if span > 0.0 { span } else { 1.0 };
            plane.mapv_inplace(|v| (v - self.min[c]) / span);
        }
        out
    }
}

/// One optional `H × W × C` kelvin frame per hour of the series.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionFrames {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub frames: Vec<Option<Array3<f32>>>,
}

impl VisionFrames {
    pub fn new(height: usize, width: usize, bands: usize, frames: Vec<Option<Array3<f32>>>) -> Result<Self> {
        for (t, f) in frames.iter().enumerate() {
            if let Some(f) = f {
                if f.dim() != (height, width, bands) {
                    return Err(Error::Invalid(format!("frame {t} is {:?}, expected {:?}", f.dim(), (height, width, bands))));
                }
            }
        }
        Ok(Self {
            height,
            width,
            bands,
            frames,
        })
    }

    pub fn valid(&self) -> Vec<bool> {
        self.frames.iter().map(Option::is_some).collect()
    }

    pub fn get(&self, t: usize) -> Option<&Array3<f32>> {
        self.frames.get(t).and_then(Option::as_ref)
    }

    /// Min/max per band over the frames present in `range`.
    pub fn fit(&self, range: Range<usize>) -> Result<VisionStats> {
        let mut min = vec![f64::INFINITY; self.bands];
        let mut max = vec![f64::NEG_INFINITY; self.bands];
        for f in self.frames[range.clone()].iter().flatten() {
            for (c, plane) in f.axis_iter(Axis(2)).enumerate() {
                for &v in plane.iter() {
                    min[c] = min[c].min(f64::from(v));
                    max[c] = max[c].max(f64::from(v));
                }
            }
        }
        if min.iter().any(|m| !m.is_finite()) {
            return Err(Error::Invalid(format!("no vision frames in hours {range:?}")));
        }
        Ok(VisionStats { min, max })
    }
}

pub fn write_frame(path: &Path, frame: &Array3<f32>) -> Result<()> {
    ndarray_npy::write_npy(path, frame)?;
    Ok(())
}

pub fn read_frame(path: &Path) -> Result<Array3<f32>> {
    Ok(ndarray_npy::read_npy(path)?)
}
