//! Dense channel-last tensors, a reverse-mode tape and gradient checking.

mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::{BatchStats, Conv2dSpec};
pub use rng::SplitMix64;
pub use scalar::{lit, DType, Element};
pub use tape::{BackwardFn, Gradients, NodeId, OpKind, Tape, Var};
pub use tensor::{numel, strides, Tensor};
