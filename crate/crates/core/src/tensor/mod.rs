//! Minimal reverse-mode differentiable array engine.

mod adam;
mod array;
pub mod fft;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;

pub use adam::Adam;
pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_params, FD_STEP};
pub use kernels::Modes;
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{Tape, Var};
