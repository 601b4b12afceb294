//! Dense tensors, a dynamic reverse-mode tape, stochastic optimizers,
//! finite-difference gradient checking and the `PFCK` checkpoint container.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod optim;
mod params;
mod real;
pub mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_store, noise_floor, relative_error, GradCheckReport};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use rng::RngStreams;
pub use tape::{CustomBackward, Grads, Tape, Var};
pub use tensor::Tensor;
