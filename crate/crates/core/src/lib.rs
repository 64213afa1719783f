//! Extreme value laws for discretely sampled dissipative SDEs.
//!
//! The crate simulates `dX_t = b(X_t) dt + dW_t` at the times `t_k = k h`,
//! discretizes the transfer operator of the sampled chain on a truncated
//! grid, perturbs it with a small ball ("hole") around a target point and
//! compares the spectral predictions with Monte Carlo estimates of the
//! extreme value and visit-count laws.
//!
//! Modules:
//! - [`sde`]: drift models, hypothesis checks and path samplers.
//! - [`kernel`]: transition densities, deterministic flow and Gaussian bound checks.
//! - [`spaces`]: grids, weighted `L¹` and bounded-variation norms.
//! - [`operator`]: transfer matrices, holes, twists and spectral quantities.
//! - [`evt`]: threshold calibration and the Monte Carlo experiments.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evt;
pub mod kernel;
pub mod operator;
pub mod rng;
pub mod sde;
pub mod spaces;

pub use error::{Error, Result};
