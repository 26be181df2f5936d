//! Low-rank adapters with pluggable rank-dependent scaling rules, an analytic
//! learning-trajectory oracle, Monte-Carlo scaling-law estimators and a toy
//! training harness.
//!
//! Scaling rules, optimizers and experiment drivers are strategies behind
//! traits, registered by name and chosen at runtime from the JSON config or
//! the command line.

// `!(x >= 0.0)` is how validation rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod net;
pub mod numerics;
pub mod optim;
pub mod report;
pub mod scaling;
pub mod theory;

pub use error::{Error, Result};
pub use numerics::{Matrix, RngStream};
