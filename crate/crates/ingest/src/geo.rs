//! Regions, lat/lon grids and the crop + pool path from tiles to vision frames.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latitude/longitude box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        if !(lat_min < lat_max && lon_min < lon_max) {
            return Err(Error::Config(format!("empty box {lat_min}..{lat_max}N {lon_min}..{lon_max}E")));
        }
        Ok(Self {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        })
    }

    /// The same box grown by `margin` degrees on every side.
    pub fn widened(&self, margin: f64) -> Self {
        Self {
            lat_min: self.lat_min - margin,
            lat_max: self.lat_max + margin,
            lon_min: self.lon_min - margin,
            lon_max: self.lon_max + margin,
        }
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }
}

/// Margin between station box and vision box.
pub const VISION_MARGIN_DEG: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    NE,
    SW,
    SE,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl Region {
    pub const REAL: [Region; 3] = [Region::NE, Region::SW, Region::SE];

    /// Station box for the observational regions.
    pub fn station_bbox(self) -> Option<BBox> {
        let b = |a, b, c, d| BBox::new(a, b, c, d).expect("static box");
        match self {
            Region::NE => Some(b(39.0, 44.0, 118.0, 123.0)),
            Region::SW => Some(b(27.0, 32.0, 101.0, 106.0)),
            Region::SE => Some(b(27.5, 32.5, 117.5, 122.5)),
            Region::Synthetic => None,
        }
    }

    pub fn vision_bbox(self) -> Option<BBox> {
        self.station_bbox().map(|b| b.widened(VISION_MARGIN_DEG))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::NE => "NE",
            Region::SW => "SW",
            Region::SE => "SE",
            Region::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ne" => Ok(Region::NE),
            "sw" => Ok(Region::SW),
            "se" => Ok(Region::SE),
            "synthetic" => Ok(Region::Synthetic),
            _ => Err(Error::Config(format!("unknown region {s}; expected NE, SW, SE or synthetic"))),
        }
    }
}

/// Regular lat/lon grid; row 0 is the northern edge, column 0 the western.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub north: f64,
    pub west: f64,
    pub resolution: f64,
    pub rows: usize,
    pub cols: usize,
}

impl GridGeometry {
    /// Full-disk gridded product: 0.02° cells, 60°N..60°S and 85°E..205°E.
    pub fn full_disk() -> Self {
        Self {
            north: 60.0,
            west: 85.0,
            resolution: 0.02,
            rows: 6000,
            cols: 6000,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox {
            lat_min: self.north - self.resolution * self.rows as f64,
            lat_max: self.north,
            lon_min: self.west,
            lon_max: self.west + self.resolution * self.cols as f64,
        }
    }

    /// `(row, col, rows, cols)` of the pixels covering `bbox`.
    pub fn pixel_window(&self, bbox: &BBox) -> Result<(usize, usize, usize, usize)> {
        let cells = |deg: f64| (deg / self.resolution).round();
        let row0 = cells(self.north - bbox.lat_max);
        let col0 = cells(bbox.lon_min - self.west);
        let rows = cells(bbox.lat_max - bbox.lat_min);
        let cols = cells(bbox.lon_max - bbox.lon_min);
        if row0 < 0.0 || col0 < 0.0 || rows < 1.0 || cols < 1.0 {
            return Err(Error::Range(format!("{bbox:?} outside grid {:?}", self.bbox())));
        }
        let (row0, col0, rows, cols) = (row0 as usize, col0 as usize, rows as usize, cols as usize);
        if row0 + rows > self.rows || col0 + cols > self.cols {
            return Err(Error::Range(format!("{bbox:?} outside grid {:?}", self.bbox())));
        }
        Ok((row0, col0, rows, cols))
    }
}

/// Block mean over `factor × factor` cells.
pub fn mean_pool(grid: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    let (h, w) = grid.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!("{h}x{w} crop is not divisible by factor {factor}")));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let area = (factor * factor) as f64;
    Ok(Array2::from_shape_fn((h / factor, w / factor), |(i, j)| {
        grid.slice(s![i * factor..(i + 1) * factor, j * factor..(j + 1) * factor]).sum() / area
    }))
}

/// Crops `bbox` out of a calibrated grid and pools it.
pub fn crop_and_pool(grid: &Array2<f64>, geometry: &GridGeometry, bbox: &BBox, factor: usize) -> Result<Array2<f64>> {
    if grid.dim() != (geometry.rows, geometry.cols) {
        return Err(Error::Config(format!(
            "grid is {:?} but geometry declares {}x{}",
            grid.dim(),
            geometry.rows,
            geometry.cols
        )));
    }
    let (r, c, h, w) = geometry.pixel_window(bbox)?;
    mean_pool(&grid.slice(s![r..r + h, c..c + w]).to_owned(), factor)
}

/// Stack of frames `T × H × W × C` in kelvin (or normalized units once scaled).
#[derive(Debug, Clone, PartialEq)]
pub struct VisionWindow {
    pub values: Array4<f64>,
}

/// One frame `H × W × C` from per-band calibrated grids.
pub fn build_frame(bands: &[Array2<f64>], geometry: &GridGeometry, bbox: &BBox, factor: usize) -> Result<Array3<f64>> {
    let planes: Vec<Array2<f64>> = bands
        .iter()
        .map(|g| crop_and_pool(g, geometry, bbox, factor))
        .collect::<Result<_>>()?;
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(2), &views).map_err(|e| Error::Config(format!("band planes disagree: {e}")))
}

/// `tiles[t][c]` is the calibrated grid of band `c` at hour `t`.
pub fn build_vision_window(tiles: &[Vec<Array2<f64>>], geometry: &GridGeometry, bbox: &BBox, factor: usize) -> Result<VisionWindow> {
    if tiles.is_empty() {
        return Err(Error::Config("no hours supplied".into()));
    }
    let frames: Vec<Array3<f64>> = tiles
        .iter()
        .map(|bands| build_frame(bands, geometry, bbox, factor))
        .collect::<Result<_>>()?;
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    let values = ndarray::stack(Axis(0), &views).map_err(|e| Error::Config(format!("frames disagree: {e}")))?;
    Ok(VisionWindow { values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_regions() {
        let ne = Region::NE.vision_bbox().unwrap();
        assert!((ne.lat_min - 38.3).abs() < 1e-12 && (ne.lat_max - 44.7).abs() < 1e-12);
        assert!((ne.lon_min - 117.3).abs() < 1e-12 && (ne.lon_max - 123.7).abs() < 1e-12);
        let sw = Region::SW.vision_bbox().unwrap();
        assert!((sw.lat_min - 26.3).abs() < 1e-12 && (sw.lon_max - 106.7).abs() < 1e-12);
        let se = Region::SE.vision_bbox().unwrap();
        assert!((se.lat_max - 33.2).abs() < 1e-12 && (se.lon_min - 116.8).abs() < 1e-12);
    }

    #[test]
    fn crop_is_320_pixels() {
        let g = GridGeometry::full_disk();
        for r in Region::REAL {
            let (_, _, h, w) = g.pixel_window(&r.vision_bbox().unwrap()).unwrap();
            assert_eq!((h, w), (320, 320));
        }
        let (row, col, _, _) = g.pixel_window(&Region::NE.vision_bbox().unwrap()).unwrap();
        assert_eq!((row, col), (765, 1615));
    }

    #[test]
    fn outside_grid_is_range_error() {
        let g = GridGeometry {
            north: 10.0,
            west: 0.0,
            resolution: 1.0,
            rows: 4,
            cols: 4,
        };
        assert!(matches!(g.pixel_window(&BBox::new(5.0, 11.0, 0.0, 2.0).unwrap()), Err(Error::Range(_))));
        assert!(matches!(g.pixel_window(&BBox::new(7.0, 9.0, 3.0, 5.0).unwrap()), Err(Error::Range(_))));
    }

    #[test]
    fn block_means() {
        let grid = Array2::from_shape_vec((4, 4), (0..16).map(f64::from).collect()).unwrap();
        let pooled = mean_pool(&grid, 2).unwrap();
        assert_eq!(pooled, ndarray::arr2(&[[2.5, 4.5], [10.5, 12.5]]));
        assert_eq!(mean_pool(&grid, 1).unwrap(), grid);
        assert!(mean_pool(&grid, 3).is_err());
    }

    #[test]
    fn constant_tiles_give_constant_window() {
        let g = GridGeometry {
            north: 2.0,
            west: 0.0,
            resolution: 0.5,
            rows: 8,
            cols: 8,
        };
        let tiles = vec![vec![Array2::from_elem((8, 8), 250.0), Array2::from_elem((8, 8), 260.0)]; 3];
        let w = build_vision_window(&tiles, &g, &BBox::new(-1.0, 1.0, 0.5, 2.5).unwrap(), 2).unwrap();
        assert_eq!(w.values.dim(), (3, 2, 2, 2));
        assert!(w.values.index_axis(Axis(3), 0).iter().all(|&v| v == 250.0));
        assert!(w.values.index_axis(Axis(3), 1).iter().all(|&v| v == 260.0));
    }
}
