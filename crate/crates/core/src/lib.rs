//! Decoder-side continual learning for toy encoder-decoder transcription
//! models.

pub mod cl;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod tasks;
pub mod vocab;

pub use error::{Error, Result};
