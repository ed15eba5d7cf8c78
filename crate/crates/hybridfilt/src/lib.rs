//! Switching-diffusion toolkit: simulation, finite-dimensional filtering and
//! parameter estimation for hybrid systems whose continuous component is a
//! drift-switched diffusion and whose hidden discrete component is a finite
//! Markov chain with state-dependent transition rates.
//!
//! The crate is organized around a small set of building blocks:
//!
//! - [`model`]: the parametric model family (base rates, drift basis, link
//!   functions, admissible parameter box) and its validation.
//! - [`fields`]: built-in rate/drift field families and the JSON model
//!   configuration format.
//! - [`path`]: sample-path containers and their CSV/JSON round-trip.
//! - [`simulate`]: exponential-clock path simulation and complete-data
//!   sufficient statistics.
//! - [`filter`]: unnormalized filter and smoother recursions with
//!   underflow-safe rescaling.
//! - [`complete`] / [`partial`]: log-likelihoods and maximum-likelihood
//!   estimators under complete and partial observation.
//! - [`em`]: filtered sufficient statistics and the EM iteration.
//! - [`oracle`]: independent reference implementations (discrete HMM forward
//!   pass, weighted conditional Monte Carlo) used by the verification suite.
//! - [`verify`]: named cross-check scenarios exposed through the CLI.

pub mod complete;
pub mod em;
pub mod error;
pub mod fields;
pub mod filter;
pub mod model;
pub mod optimize;
pub mod oracle;
pub mod partial;
pub mod path;
pub mod rng;
pub mod simulate;
pub mod suffstats;
pub mod verify;

pub use error::{Error, Result};
