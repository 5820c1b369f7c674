//! The staged progressive-resizing protocol: configuration, run loop, run
//! state, event log and checkpoints.

mod checkpoint;
mod config;
mod run;
mod state;

pub use checkpoint::{load_checkpoint, save_checkpoint, AdamMeta, Checkpoint, CheckpointError, CheckpointMeta, MAGIC, VERSION};
pub use config::{default_protocol, desk_protocol, LrPolicy, ProtocolConfig, StagePlan, StepPlan};
pub use run::{EventLog, LrMode, ModelTarget, Observer, SharedState, Trainer};
pub use state::{EpochRecord, LrChoice, LrChoiceSource, Position, RunState, RunStatus};

use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::nn::ModelError;
use crate::optim::OptimError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite training loss at stage {stage}, step {step}, epoch {epoch}, batch {batch}")]
    Diverged { stage: usize, step: usize, epoch: usize, batch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}
