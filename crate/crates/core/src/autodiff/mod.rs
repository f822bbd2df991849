//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records eagerly evaluated operations; [`Tape::backward`] returns
//! gradients for every recorded value. Parameters live in a [`ParamStore`] and are
//! bound to a tape per step with [`Tape::param`].

mod params;
mod tape;
mod tensor;

pub use params::{clip_grad_norm, AdamConfig, CheckpointError, ParamId, ParamStore};
pub use tape::{flop_count, reset_flop_count, AutodiffError, Gradients, Tape, Var};
pub use tensor::Tensor;
