//! Dense `f64` tensors with reverse-mode differentiation and Adam.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{finite_diff_check, FD_NOISE_FACTOR};
pub use layers::{Linear, Norm};
pub use params::{ParamId, ParamStore};
pub use tape::{eval_and_backprop, Activation, Grads, Op, Tape, Var, GATHER_ZERO, LN_EPS};
pub use tensor::Tensor;
