//! Adaptive conformal safety barrier certificates for multi-robot MPC.
//!
//! Robots follow single-integrator or unicycle dynamics with additive
//! velocity noise. Each step an MPC plans over a short horizon subject to
//! barrier certificates that are tightened by conformal quantiles of past
//! prediction errors, one quantile per look-ahead lag.

pub mod acp;
pub mod cbf;
pub mod dynamics;
pub mod error;
pub mod mpc;
pub mod sim;

pub use error::{Error, Result};
