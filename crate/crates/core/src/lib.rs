//! Portfolio optimization under hidden market regimes and contagious distress.
//!
//! The library is organized as a pipeline:
//!
//! - [`model`] owns the market primitives: the hidden-chain generator, the
//!   per-regime coefficient tables, and every derived coefficient (regime
//!   interpolation, filter diffusion, jump revision, HJB drift and potential).
//! - [`filter`] simulates the physical market and runs the nonlinear filter
//!   that turns observed prices and distress events into regime probabilities.
//! - [`hjb`] solves the recursive system of semilinear parabolic equations
//!   whose solution is the exponential transform of the value function.
//! - [`strategy`] evaluates the optimal feedback allocation from a solved
//!   value surface and checks its pointwise optimality.
//! - [`verify`] confirms the PDE value by independent Monte Carlo along two
//!   different probabilistic routes.

pub mod error;
pub mod filter;
pub mod hjb;
pub mod model;
pub mod strategy;
pub mod verify;

pub use error::{Error, Result};
