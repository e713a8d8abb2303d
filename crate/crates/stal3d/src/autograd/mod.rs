//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Large enough for a small BEV detector, a per-position domain
//! discriminator, and a gradient reversal layer; nothing more. Float64
//! throughout so finite-difference checks have headroom.

mod checkpoint;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use optim::{AdamConfig, OneCycle, ParamEntry, ParamLeaves, ParamStore};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;
