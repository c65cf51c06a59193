//! Desk-scale laboratory for compositional flow generation.
//!
//! The crate implements a full stack on synthetic low-dimensional domains:
//!
//! - [`flow`]: rectified-flow data path (forward noising, ODE stepping, a
//!   small trainable velocity field, and a closed-form Gaussian oracle).
//! - [`schedule`] / [`sampler`]: controllable-stochasticity reverse SDE
//!   sampling with decaying noise schedules and per-step transition records.
//! - [`lyapunov`]: covariance propagation for the linearized sampler and the
//!   budget-constrained noise-allocation problem.
//! - [`grpo`]: group-relative policy optimization over recorded trajectories.
//! - [`reward`]: the three-level reward algebra over pluggable scorers.
//! - [`prompt`] / [`scene`] / [`chain`]: hierarchical prompt trees, the
//!   synthetic scene domain, and the chained synthesis pipeline.
//! - [`benchgen`] / [`judge`]: benchmark record generation and the accuracy
//!   evaluation harness.
//! - [`runner`]: experiment orchestration with reproducible run directories.

pub mod benchgen;
pub mod chain;
pub mod error;
pub mod field;
pub mod flow;
pub mod grpo;
pub mod judge;
pub mod lyapunov;
pub mod numeric;
pub mod prompt;
pub mod remote;
pub mod reward;
pub mod rng;
pub mod runner;
pub mod sampler;
pub mod scene;
pub mod schedule;

pub use error::CoreError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
