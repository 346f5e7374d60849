//! Dense linear algebra: matrices, centering, Jacobi SVD, pseudoinverse,
//! whitened bases and non-negative least squares.

mod matrix;
mod nnls;
mod svd;
pub mod vector;

pub use matrix::DenseMatrix;
pub use nnls::{nnls, NnlsSolution};
pub use svd::{
    center, compact_svd, pseudo_inverse, whitened_basis, CompactSvd, WhitenedBasis,
    DEFAULT_RANK_TOL,
};
#[allow(unused_imports)]
pub(crate) use svd::append_constant;
