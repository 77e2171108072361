//! Max-Nash-welfare allocation under additive at-most-one preferences.
//!
//! The crate solves the AMO-constrained Eisenberg-Gale program with a
//! first-order method, recovers prices from the allocation and measures how
//! far the result is from a competitive equilibrium.

pub mod analysis;
pub mod auction;
pub mod bounds;
pub mod deviation;
pub mod error;
pub mod market;
pub mod solver;

pub use error::{Error, Result};
pub use market::Market;
pub use solver::{solve_amo_eg, solve_eg_plain, Mode, Solution, SolverConfig};
