//! Online regularisation for dynamic inverse problems.
//!
//! The crate reconstructs a time-varying quantity from a stream of indirect,
//! noisy measurements, spending only one corrector step per incoming frame,
//! and ships the measurement models, regularisers, batch reference solvers
//! and diagnostics needed to check the supporting convex-analytic estimates
//! numerically.

pub mod batch;
pub mod convex;
pub mod diag;
pub mod harness;
pub mod lemmas;
pub mod linop;
pub mod eit;
pub mod error;
pub mod model;
pub mod online;
pub mod reg;

pub use error::{Error, Result};
