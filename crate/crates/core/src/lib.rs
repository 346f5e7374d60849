//! Batch-normalized two-layer ReLU networks, their convex reformulations
//! over hyperplane arrangements, closed-form optima with dual certificates,
//! and probes of the implicit regularization of gradient descent.
//!
//! Numerical routines are generic over [`Real`] (`f32` or `f64`). The
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! experiment harness and the CLI use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod probes;
pub mod arrangements;
pub mod closed_form;
pub mod convex;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Svd = linalg::CompactSvd<f64>;
