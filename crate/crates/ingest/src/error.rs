use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corrupt tile: count {count} at pixel {index} outside 1..=4096")]
    CorruptTile { index: usize, count: u16 },
    #[error("tile payload has {actual} bytes, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("bz2 decompression failed: {0}")]
    Decompression(String),
    #[error("calibration table: {0}")]
    Calibration(String),
    #[error("region outside grid: {0}")]
    Range(String),
    #[error("timestamps out of order: {0}")]
    Ordering(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    NpyRead(#[from] ndarray_npy::ReadNpyError),
    #[error(transparent)]
    NpyWrite(#[from] ndarray_npy::WriteNpyError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
