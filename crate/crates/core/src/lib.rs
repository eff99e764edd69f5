//! Coursework-choice game with race-heterogeneous social incentives.
//!
//! The crate covers the full structural pipeline: the Bayesian-Nash
//! equilibrium of a graduating class ([`game`]), two-step nested fixed point
//! maximum likelihood ([`estimation`]), the Theil entropy segregation index
//! ([`segregation`]), entropy-targeted student reassignment ([`reassign`]),
//! and synthetic data plus counterfactual simulation ([`simulate`]).

pub mod dataset;
pub mod error;
pub mod estimation;
pub mod game;
pub mod model;
pub mod optim;
pub mod reassign;
pub mod segregation;
pub mod simulate;

pub use error::{Error, Result};
