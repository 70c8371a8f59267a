//! SGD training on synthetic imbalanced volumes, plus the ablation harness.

pub mod ablation;
pub mod config;
pub mod deform;
pub mod optim;
pub mod run;
pub mod synth;

use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::net::NetError;

pub use ablation::{rows_to_csv, run_ablation, AblationPlan, AblationRow, AblationTable};
pub use config::{ConfigError, RunConfig};
pub use deform::{deform_augment, displacement_field, DeformSpec, DisplacementField};
pub use optim::{sgd_step, OptimizerConfig, OptimizerState};
pub use run::{train_run, train_run_with, write_run_artifacts, LogRow, TrainOutcome};
pub use synth::{gen_synthetic_case, SynthSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error("synthetic spec infeasible: {0}")]
    InfeasibleSpec(String),
    #[error("non-finite gradient in {param} at iteration {iteration}")]
    NonFiniteGradient { iteration: u64, param: String },
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: u64 },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}
