//! Matrix-free second-order training for fully-connected networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`] — dense vector kernels and the deterministic reduction used
//!   everywhere a distributed sum must be reproducible.
//! * [`model`] — the network itself: loss, gradient, exact Hessian-vector
//!   products (R-operator) and Gauss-Newton-vector products.
//! * [`krylov`] — matrix-free inner solvers (truncated CG and Bi-CG-STAB)
//!   with negative-curvature detection and descent-direction selection.
//! * [`optimizer`] — the outer Hessian-free loop (damping, Armijo line
//!   search, warm starts, the hybrid curvature schedule) plus an SGD baseline.
//! * [`parallel`] — an in-process data-parallel execution layer that mirrors
//!   an N-node reduce pattern, plus analytic communication-cost models.
//! * [`data`] — IDX (MNIST) ingestion, synthetic problem generation, splits
//!   and mini-batch sampling.

pub mod data;
pub mod error;
pub mod krylov;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod parallel;

pub use error::{Error, Result};
