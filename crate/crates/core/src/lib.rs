//! Calibration of unknown spatial coefficient fields in 1D evolution PDEs.
//!
//! The unknown field is represented by a small dense tanh network, the
//! network is evaluated at grid points inside a finite-difference scheme, and
//! the squared scheme residual over observed snapshots is minimized with a
//! (optionally projected) L-BFGS optimizer.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod field_net;
pub mod forward;
pub mod lbfgs;
pub mod residual;
pub mod sensitivity;

pub use error::{Error, Result};
pub use field_net::{
    DerivativeBounds, NetworkArchitecture, NetworkCheckpoint, NetworkParams, OutputTransform,
    ProjectionConstraint,
};
pub use config::RunConfig;
pub use experiments::{CalibrationResult, CalibrationSettings, ErrorReport, ManufacturedProblem, NoiseSpec, SnapshotSpec};
pub use forward::{Grid1D, TimeStepping};
pub use lbfgs::{OptimizationTrace, OptimizerConfig, StopReason};
pub use residual::{ProblemKind, ResidualProblem, SnapshotSet};
pub use sensitivity::{QuantityFunctional, SensitivityRegion};
