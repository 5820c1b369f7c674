//! Adam over layer groups, discriminative learning rates and the learning
//! rate range test.

mod adam;
mod lr_finder;

pub use adam::{Adam, AdamConfig, GradientDescent, Optimizer};
pub use lr_finder::{
    lr_range_test, CurvePoint, CurveTracker, LrCurve, LrFinderConfig, QuadraticTarget, StepTarget, StopReason,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter {name} is trainable but has no gradient")]
    MissingGrad { name: String },
    #[error("{got} learning rates for {expected} layer groups")]
    GroupMismatch { expected: usize, got: usize },
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: usize },
    #[error("{0}")]
    Target(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSpacing {
    /// Evenly spaced values.
    Linear,
    /// Evenly spaced logarithms.
    Geometric,
}

/// One learning rate per layer group, input end first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrAssignment {
    pub rates: Vec<f64>,
}

impl LrAssignment {
    pub fn uniform(lr: f64, n_groups: usize) -> Self {
        Self { rates: vec![lr; n_groups] }
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }
}

/// Rates from `lr_first` (group 0) to `lr_last` (last group), interior
/// points spaced per `mode`. Endpoints are returned exactly.
pub fn discriminative_lrs(lr_first: f64, lr_last: f64, n_groups: usize, mode: LrSpacing) -> Result<LrAssignment, OptimError> {
    if !(lr_first > 0.0 && lr_first.is_finite() && lr_last.is_finite() && lr_first <= lr_last) {
        return Err(OptimError::Config(format!("need 0 < lr_first <= lr_last, got {lr_first} and {lr_last}")));
    }
    match n_groups {
        0 => Err(OptimError::Config("need at least one layer group".into())),
        1 if lr_first != lr_last => Err(OptimError::Config("a single group needs lr_first == lr_last".into())),
        1 => Ok(LrAssignment::uniform(lr_first, 1)),
        n => {
            let last = (n - 1) as f64;
            let mut rates: Vec<f64> = (0..n)
                .map(|i| {
                    let t = i as f64 / last;
                    match mode {
                        LrSpacing::Linear => lr_first + (lr_last - lr_first) * t,
                        LrSpacing::Geometric => lr_first * (lr_last / lr_first).powf(t),
                    }
                })
                .collect();
            rates[0] = lr_first;
            rates[n - 1] = lr_last;
            Ok(LrAssignment { rates })
        }
    }
}
