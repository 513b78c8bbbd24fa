//! Deterministic federated learning simulation.
//!
//! - [`tensor`]: dense tensors, reverse-mode differentiation, losses, SGD and
//!   a finite-difference gradient checker.
//! - [`models`]: MLP classifier and GIN graph network with sum/mean/max/mix
//!   readout.
//! - [`datagen`]: synthetic tasks, IID and Dirichlet client partitioning, IDX
//!   loading.
//! - [`fedcore`]: round scheduler and the FedAvg, FedProx, delta-regularized
//!   (Fedr) and knowledge-distillation (FedKd) strategies.
//! - [`runlog`]: evaluation metrics and CSV persistence.

// `!(x > 0.0)` rejects NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod fedcore;
pub mod io;
pub mod models;
pub mod runlog;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
