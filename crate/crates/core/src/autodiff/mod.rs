//! Reverse-mode automatic differentiation over `(batch, channels, pixels)`
//! tensors, with fused graph-convolution, normalization, pooling and dropout
//! operations.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_guarded, gradient_check_many, GradCheckReport, GRAD_FLOOR};
pub use tape::{BatchStats, DropoutNoise, Tape, Var};
pub use tensor::Tensor;
