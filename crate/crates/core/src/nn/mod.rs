//! Layers and model assembly.

mod batchnorm;
mod dropout;
mod model;

pub use batchnorm::{batchnorm, BatchNormState, BatchStats, DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};
pub use dropout::{dropout, dropout_with_mask, DropoutSpec, DropoutVariant};
pub use model::{Architecture, BottleneckBlock, BoundParams, ForwardOutput, Linear, ModelParams};

/// Train mode samples dropout masks and uses batch statistics; eval mode is
/// deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
