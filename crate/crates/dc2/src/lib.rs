//! File formats, datasets, checkpoints, training/evaluation drivers and the
//! HTTP service around `dc2-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod repro;
pub mod service;
pub mod session;
pub mod training;
pub mod wire;

pub use error::{Error, Result};
