//! Shaped arrays with tape-based reverse-mode differentiation, covering the
//! primitive set of a windowed-attention UNet.

mod attention;
mod backward;
mod error;
pub mod kernels;
mod optim;
mod real;
mod tape;
mod tensor;

pub use attention::cosine_attention;
pub use backward::Gradients;
pub use error::TensorError;
pub use optim::{AdamW, AdamWConfig};
pub use real::Real;
pub use tape::{Tape, Var, LN_EPS, NORM_EPS, TAU_MIN};
pub use tensor::Tensor;
