//! Minimal reverse-mode differentiation substrate.
//!
//! Everything the training losses need and nothing more: a dense f64
//! [`Tensor`], a recording [`Tape`] over a fixed op set, an adaptive-moment
//! optimizer with warm-up, and a finite-difference harness that can check
//! any composed loss.

pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, DEFAULT_STEP};
pub use optim::OptimizerState;
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
