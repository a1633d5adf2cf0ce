pub mod ablation;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod graph_core;
pub mod interpretation;
pub mod model;
pub mod numerical_encoder;
pub mod optim;
pub mod params;
pub mod training;
pub mod vision_encoder;

pub use error::{Error, Result};
