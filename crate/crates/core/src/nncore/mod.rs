//! Minimal reverse-mode differentiation for the handful of operations the
//! proportion and pooling networks need.
//!
//! Everything is generic over [`Real`] so that training runs in `f32` while
//! gradient checks run the identical code path in `f64`.

mod conv;
mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use conv::{conv3d_forward, conv_output_len};
pub use gradcheck::{grad_check, relative_error};
pub use graph::{Graph, ResidualParams, Var};
pub use optim::{AdadeltaConfig, AdadeltaState, ParamStore};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernel of size {kernel} does not fit input extent {input} on axis {axis}")]
    KernelTooLarge {
        axis: usize,
        kernel: usize,
        input: usize,
    },
    #[error("channel mismatch: input has {input} channels, residual branch has {branch}")]
    ChannelMismatch { input: usize, branch: usize },
    #[error("empty mask")]
    EmptyMask,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
