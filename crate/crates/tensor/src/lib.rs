//! Minimal dense-tensor numerical core.
//!
//! Values live in row-major [`Tensor`]s. Differentiable computations are
//! recorded on a [`Tape`] (a Wengert list) and replayed in reverse by
//! [`Tape::backward`]. Trainable weights are kept in a [`ParamStore`] and
//! updated by [`Adam`].
//!
//! Everything is generic over [`Element`] so the same graph can run in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod adam;
mod element;
mod error;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
