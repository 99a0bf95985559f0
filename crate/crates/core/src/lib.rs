//! Outlier- and bias-robust Bayesian state estimation.
//!
//! The crate provides Gaussian-filter primitives, several robust filters and
//! smoothers, a particle filter over abnormality regimes, robust reweighting
//! heuristics for point-cloud registration, Cramér–Rao bound recursions and
//! a Monte-Carlo harness that reproduces tracking benchmarks.

pub mod bdm;
pub mod bounds;
pub mod emorf;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod map_ekf;
pub mod perception;
pub mod pf;
pub mod rng;
pub mod sor;
pub mod ssm;

pub use error::{Error, Result};
