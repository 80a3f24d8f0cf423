//! Dense `f64` tensors, a reverse-mode autodiff tape, Adam, gradient
//! clipping, finite-difference checks and a binary checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod init;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use error::{NumError, Result};
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{clip_grad_norm, Parameter, ParameterSet};
pub use tensor::Tensor;
