//! Prompt-guided video segmentation and captioning at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and contains only computation: a
//! small dense-tensor library with reverse-mode differentiation, the
//! scene-graph encoder, the iterative query former, the decoding heads,
//! the training objectives, the evaluation metrics and a synthetic
//! moving-shapes video generator. File formats, dataset IO and the CLI
//! live in the `segcap` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod giqformer;
pub mod heads;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod ptgformer;
pub mod scenegraph;
pub mod train;

pub use error::{Error, Result};
pub use mask::Mask;
pub use numerics::{ParamId, ParamStore, Tape, Tensor, Var};
