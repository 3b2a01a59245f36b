//! Adaptive feature norm (AFN) unsupervised domain adaptation.
//!
//! The crate is organized bottom-up:
//!
//! - [`autograd`]: tensors and a reverse-mode tape.
//! - [`nn`]: dropout variants, batch norm and the backbone/bottleneck/head model.
//! - [`objectives`]: cross-entropy, feature norms, MMFND, HAFN, SAFN and entropy.
//! - [`data`]: synthetic domain shift, CSV ingestion, partial label spaces, batching.
//! - [`train`]: SGD with momentum, the adaptation loop, evaluation, checkpoints.
//! - [`metrics`]: the negative-transfer gaps and CSV emitters.
//! - [`cli`]: the `afn` command-line front end.

// `!(x > 0.0)` is how validation rejects NaN along with the bad range
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};
