//! Continuous-depth semantic segmentation at desk scale.
//!
//! The network body is a four-branch multi-resolution module integrated as an
//! ODE, trained with adjoint-sensitivity gradients; a discrete residual
//! baseline built from the same module is provided for comparison. Everything
//! rests on a small tape-based reverse-mode autodiff engine, so gradients,
//! solver order, activation-memory behaviour and parameter counts are all
//! verifiable from first principles.

pub mod adjoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod solver;
pub mod tape;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
