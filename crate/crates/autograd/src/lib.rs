//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//!
//! The operation set is deliberately narrow: it covers what recurrent graph
//! convolutions, convolutional LSTMs and attention layers need (broadcasting
//! arithmetic, batched matrix products, im2col convolutions, row softmax,
//! layer normalization, axis reductions) and nothing more.

mod conv;
mod reduce;
mod tape;

pub mod check;

pub use conv::{conv2d_forward, Conv2dSpec};
pub use tape::{Gradients, Tape, Var};

/// Dense dynamic-rank tensor used throughout the tape.
pub type Tensor = ndarray::ArrayD<f64>;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("seed gradient shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
}
