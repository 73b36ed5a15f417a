//! File formats, dataset IO, checkpoints and the command implementations
//! behind the `segcap` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod gradcheck;
pub mod tensor_io;

pub use error::{Error, Result};
