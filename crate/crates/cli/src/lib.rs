//! Library side of the `ij` binary: configuration, model specs, and the
//! Monte Carlo experiment drivers.

pub mod config;
pub mod coverage;
pub mod models;
pub mod power;
pub mod report;
pub mod reproduction;
pub mod tabular;
