//! Differentiable operations, implemented as methods on [`crate::Tape`].
//!
//! Shape errors are programming errors and panic; fallible user-facing
//! validation lives in the crates that call into this one.

mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod shape;

pub use conv::{conv2d_out_shape, conv3d_out_shape};
