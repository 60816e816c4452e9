//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The pieces: a plain [`Tensor`] value type, a define-by-run [`Graph`] whose
//! [`Var`] handles carry the differentiable ops, a finite-difference
//! [`gradcheck`](gradcheck::gradcheck) harness, [`Adam`] with decoupled weight
//! decay, the FDTN tensor file format, and a seeded [`Rng`].
//!
//! Training runs in f32; gradient checking selects f64 through the same
//! generic code.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use graph::{Graph, Padding, Var};
pub use rng::{derive_seed, Rng};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
