//! Debiased kernel inference.
//!
//! Kernel ridge regression for the outcome regression, the kernel ridge
//! Riesz representer for the debiasing weights, and cross-fitted debiased
//! estimates of linear functionals with Gaussian confidence intervals.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernels`] — product kernels, Gram matrices, constant-function norms.
//! * [`functionals`] — the targeted functionals and the extended kernel.
//! * [`krr`] and [`riesz`] — the two nuisance estimators and their tuning.
//! * [`dml`] — cross-fitting, point estimate, variance and intervals.
//! * [`oracle`] — brute-force references on finite supports.
//! * [`sim`] — data generating processes and the coverage harness.

pub mod dml;
pub mod error;
pub mod functionals;
pub mod kernels;
pub mod krr;
pub mod linalg;
pub mod oracle;
pub mod riesz;
pub mod sim;
pub mod table;

pub use error::{Error, Result};
