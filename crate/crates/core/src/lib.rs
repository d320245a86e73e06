//! Numerical toolkit for the variational calculus of controlled diffusions.
//!
//! The crate has two legs that check each other:
//!
//! * a simulation leg — Euler scheme for the diffusion and its shifted
//!   versions, reconstruction of the driving Brownian motion through the
//!   pseudo-inverse pair of the diffusion matrix, Girsanov reweighting in
//!   log domain, and stochastic optimization of the control objective
//!   `E[f(shifted system) + |u|_H^2 / 2]`;
//! * an exact leg — a scaled-random-walk path space small enough to
//!   enumerate, on which free energies, Gibbs measures, relative entropies,
//!   Doob martingales and the adapted-control infimum are computed exactly.
//!
//! Monte Carlo answers must agree with closed forms within standard errors,
//! and every structural identity must agree with the tree oracle to near
//! machine precision; the test suites and the CLI `verify` battery are
//! built around those two rules.

pub mod coeffs;
pub mod error;
pub mod functional;
pub mod girsanov;
pub mod grid;
pub mod pinv;
pub mod pipeline;
pub mod sde;
pub mod shift;
pub mod stats;
pub mod stream;
pub mod tree;
pub mod variational;

pub use coeffs::CoefficientField;
pub use error::{Error, Result};
pub use functional::PathFunctional;
pub use grid::{Path, TimeGrid};
pub use shift::{Adaptedness, CameronMartinShift};
pub use stats::EstimateWithError;
pub use stream::RandomStream;
