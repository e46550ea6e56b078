//! Newton-Raphson output tracking with nonlinear and Koopman-lifted
//! predictors.

// `!(x > 0.0)` is used on purpose so that NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod controller;
pub mod error;
pub mod harness;
pub mod koopman;
pub mod linalg;
pub mod ode;
pub mod systems;

pub use error::{Error, Result};
pub use linalg::Matrix;
