//! Partially observed stochastic control with delay.
//!
//! Forward simulation of controlled delay jump-diffusions under the reference
//! measure (observation path is a Brownian motion), anticipated backward
//! adjoints by least-squares Monte Carlo, first and second Gateaux
//! derivatives of the performance functional, Kalman–Bucy filtering, and
//! maximum-principle residual checks.
//!
//! Everything numerical is generic over [`Real`] (`f32`, `f64`); the aliases
//! below fix `f64`, which the experiment pipelines use.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod absde;
pub mod config;
pub mod error;
pub mod experiments;
pub mod export;
pub mod filtering;
pub mod forward_sim;
pub mod model;
pub mod models;
pub mod regression;
pub mod scalar;
pub mod smp;
pub mod time_grid;
pub mod variational;

pub use error::{Error, Result};
pub use scalar::{Estimate, Real};

pub type Grid = time_grid::TimeGrid<f64>;
pub type Noise = time_grid::NoisePath<f64>;
pub type Control = model::ControlProcess<f64>;
pub type Ensemble = forward_sim::ForwardEnsemble<f64>;

pub type Grid32 = time_grid::TimeGrid<f32>;
pub type Ensemble32 = forward_sim::ForwardEnsemble<f32>;

pub type Adjoint = absde::AdjointSolution<f64>;
pub type PSolution = absde::PSolution<f64>;
pub type Riccati = filtering::RiccatiSolution<f64>;
pub type Variations = variational::VariationalPaths<f64>;
pub type Config = config::ExperimentConfig;
