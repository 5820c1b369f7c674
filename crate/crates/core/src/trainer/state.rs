use serde::{Deserialize, Serialize};

use crate::metrics::EvalReport;
use crate::optim::LrCurve;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Idle,
    Lrfind,
    Training,
    AwaitingLr,
    Done,
    Failed,
}

/// Next unit of work: stage, step within the stage, epoch within the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct Position {
    pub stage: usize,
    pub step: usize,
    pub epoch: usize,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub lrs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrChoiceSource {
    /// Automatic mode used the range test's suggestion.
    Suggested,
    User,
    /// No interactive choice arrived in time.
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrChoice {
    pub stage: usize,
    pub step: usize,
    pub suggested_lr: f64,
    pub chosen_lr: f64,
    pub source: LrChoiceSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub status: RunStatus,
    pub position: Position,
    pub completed_epochs: usize,
    pub total_epochs: usize,
    pub history: Vec<EpochRecord>,
    pub lr_curve: Option<LrCurve>,
    pub lr_choices: Vec<LrChoice>,
    pub error: Option<String>,
    pub report: Option<EvalReport>,
}

impl RunState {
    pub fn new(total_epochs: usize) -> Self {
        Self {
            status: RunStatus::Idle,
            position: Position::default(),
            completed_epochs: 0,
            total_epochs,
            history: Vec::new(),
            lr_curve: None,
            lr_choices: Vec::new(),
            error: None,
            report: None,
        }
    }
}
