//! Low-dose Poisson phase retrieval: Wirtinger gradient descent with
//! constant step sizes backed by Hessian bounds, variance-stabilizing
//! transforms, and a seeded dose-sweep harness.

pub mod exec;
pub mod experiment;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod vst;

use thiserror::Error;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error(transparent)]
    Vst(#[from] vst::VstError),
    #[error(transparent)]
    Solver(#[from] optimizer::SolverError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Experiment(#[from] experiment::ExperimentError),
}

pub use exec::Execution;
pub use linalg::{CVec, MeasurementFrame, PowerIteration};
pub use losses::{LossKind, LossModel, Target};
pub use metrics::{aggregate, relative_error, AggregateRow, RunSummary};
pub use model::{FrameSpec, InstanceFile, ProblemInstance};
pub use optimizer::{solve, solve_with, SolverConfig, SolverRun, StepMode, StopReason};
pub use vst::{optimal_shift, transformed_moments, variance_curve, Transform};
