//! Exact non-Markovian dynamics of open quantum systems coupled to Gaussian
//! bosonic environments, by stochastic unraveling on the Keldysh contour.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bath;
pub mod contour;
pub mod error;
pub mod linalg;
pub mod measurement;
pub mod noise;
pub mod oracle;
pub mod propagator;
pub mod scalar;
pub mod svne;
pub mod system;
pub mod tol;
pub mod wick;

pub use error::{Error, Result};
pub use scalar::{Cx, Real};

pub type Complex64 = Cx<f64>;
pub type ComplexMatrix = linalg::CMat<f64>;
pub type ComplexVector = linalg::CVec<f64>;
pub type Density = linalg::DensityOperator<f64>;
