//! Experiments, dataset handling and output formats behind the `bittrace` binary.

pub mod checkpoint;
pub mod error;
pub mod fluct;
pub mod idx;
pub mod mask;
pub mod mnist;
pub mod pwl;
pub mod trace;

pub use error::{CliError, Result};
