//! Numerical toolkit for control of stochastic Volterra systems driven by
//! time-changed Lévy noise.
//!
//! The crate is organised bottom-up: grids and random streams, the rate
//! process and the noise field, forward Volterra solvers, a regression
//! engine for conditional expectations, the non-anticipating derivative,
//! backward SDEs, maximum-principle checks and the harvesting case study.

pub mod bsde;
pub mod condexp;
pub mod control;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod harvest;
pub mod naderiv;
pub mod noise;
pub mod rng;
pub mod stats;
pub mod timechange;
pub mod volterra;

pub use error::{Error, Result};
