//! Reverse-mode automatic differentiation over dense double-precision arrays.
//!
//! Operations are recorded on a [`Tape`] as they are evaluated; a single
//! reverse sweep from a scalar output produces [`Gradients`] for every
//! value that depends on a parameter. Parameters live in a named
//! [`ParamStore`] which can be written to and read from a flat binary
//! checkpoint.

mod array;
mod gradcheck;
mod params;
mod tape;

use thiserror::Error;

pub use array::Array;
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use params::{read_checkpoint, write_checkpoint, CheckpointError, ParamStore, ParamVars, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{Gradients, Tape, Var};

/// Group normalization epsilon.
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
