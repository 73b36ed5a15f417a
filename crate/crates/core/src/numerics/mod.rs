//! Dense tensors, reverse-mode autodiff and the attention/MLP building blocks.

mod gradcheck;
mod nn;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use nn::{key_mask, l2_normalize_rows, Activation, AttentionParams, Linear, Mlp};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
