//! Training, evaluation and file formats around `ternq-core`.

pub mod ablation;
pub mod checkpoint;
pub mod corpus;
mod error;
pub mod format;
pub mod manifest;
pub mod metrics;
pub mod packfile;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
