//! Kernel two-sample tests in ℓ1 geometry.
//!
//! The crate computes L1-ME and L1-SCF statistics (mean embeddings and
//! smooth characteristic functions evaluated at J test locations, whitened
//! by a regularized pooled covariance and summed in absolute value), their
//! Monte-Carlo null thresholds, and a gradient-ascent optimizer for the test
//! locations and kernel width. ℓ2 (ME, SCF), MMD and finite-sample Hoeffding
//! tests are included as baselines, together with a seeded benchmark harness.

pub mod error;
pub mod harness;
pub mod kernels;
pub mod matops;
pub mod nulldist;
pub mod optimizer;
pub mod problems;
pub mod seed;
pub mod statistics;

pub use error::{Error, Result};
