//! Minimal reverse-mode tensor engine: exactly the layers the flow model
//! needs (same-size convolution, batch norm, depth-to-space, dense,
//! embeddings, dropout, ReLU) plus the structural normalization op.

mod kernels;
mod params;
mod scalar;
mod tensor;

pub mod gradcheck;
pub mod layers;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_params, grad_check_params_where, GradCheckReport};
pub use layers::{BatchNorm2d, BnConfig, BnUpdate, Conv2d, Dense, Embedding, Mode, Pass, SubPixelBlock};
pub use params::{Buffer, BufferId, Init, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
