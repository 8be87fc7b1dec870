//! Minimal numeric substrate: dense matrices on a reverse-mode tape, the
//! layer rules the grounding model needs, AdamW and a finite-difference
//! gradient checker.
//!
//! Every value on a [`Tape`] is a row-major 2-D matrix. Vectors are `1 × d`.
//! Higher-rank parameters (convolution kernels) enter the tape flattened to
//! `product(dims[..last]) × dims[last]`.

mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
mod rng;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{analytic_grads, grad_check, GradCheckOptions, GradCheckReport, Objective};
pub use optim::{AdamState, AdamW, ParamStore, StepStats};
pub use rng::{mix64, RngState};
pub use tape::{Axis, Grads, Tape, Var};
pub use tensor::{Real, Tensor};
