//! Functional risk minimization (FRM).
//!
//! FRM models every training point as produced by its own small perturbation
//! of the central parameters, measured in function space, and maximizes the
//! likelihood of those perturbations. This crate provides the exact linear
//! objective, its Taylor/Laplace approximation for differentiable models, the
//! matching ERM baselines, and the experiment harness built on them.

pub mod data;
pub mod diff;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metric;
pub mod models;
pub mod mountain_car;
pub mod objectives;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod synth;

pub use data::{Dataset, LabeledBatch};
pub use error::{FrmError, Result};
pub use param::ParamVector;
