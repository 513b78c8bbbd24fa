//! Command-line driver for the simulator: experiment configs, the
//! partition / simulate / gradcheck / report commands and their artifacts.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use experiment::{simulate, Federation, RunOutput, Stage};
