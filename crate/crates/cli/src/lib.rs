//! Command-line driver: run configuration, joint training, sampling,
//! evaluation, guidance sweeps, ablations and the gradient suite.

pub mod commands;
pub mod config;
pub mod evaluate;
pub mod gradsuite;
pub mod model;
pub mod parallel;
pub mod toy;
pub mod train;

pub use config::RunConfig;
