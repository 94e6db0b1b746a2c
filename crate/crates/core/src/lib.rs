//! Parameter-conditioned neural PDE surrogates.
//!
//! A channel-attention module maps the current field and the PDE parameter
//! to estimated future states, which a base surrogate (a small FNO or a
//! periodic CNN) refines into the next step. Training follows a curriculum
//! that moves from teacher forcing to autoregressive rollout.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod cape;
pub mod error;
pub mod metrics;
pub mod models;
pub mod pde;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
