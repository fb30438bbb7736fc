//! Embedding-free attention segmentation transformer.
//!
//! The crate is organized bottom-up:
//!
//! * [`numerics`]: dense tensors with reverse-mode differentiation.
//! * [`attention`]: embedding-free attention, the embedded baseline and the
//!   key/value spatial reducers.
//! * [`blocks`]: patch embedding, feed-forward layer and the transformer block.
//! * [`model`]: the four-stage encoder, all-attention decoder and checkpoints.
//! * [`isr`]: reduction-ratio schedules and inference-time reduction sweeps.
//! * [`flops`]: analytic MAC and parameter accounting.
//! * [`harness`]: synthetic data, training, evaluation and experiments.
//! * [`cli`]: the command implementations behind the `efaseg` binary.

pub mod attention;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod flops;
pub mod harness;
pub mod isr;
pub mod model;
pub mod numerics;
pub mod params;

pub use error::{Error, Result};
