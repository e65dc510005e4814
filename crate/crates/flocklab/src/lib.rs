//! Kinetic alignment models with singular influence kernels.
//!
//! The crate is organized bottom-up: `kernels` defines the influence
//! functions and their sharp envelopes, `particles` integrates the
//! stochastic ensembles, `moments` deposits velocity moments on grids and
//! audits the balance laws, `scalings` runs small-parameter sweeps against
//! a priori budgets, and `macrosolver` solves the limiting hydrodynamic
//! system by fixed-point iteration.

pub mod grid;
pub mod kernels;
pub mod macrosolver;
pub mod moments;
pub mod particles;
pub mod potential;
pub mod riesz;
pub mod rng;
pub mod scalings;
