use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::{AugmentPolicy, NormalizationStats};
use crate::nn::{FreezeMode, ResNetConfig};
use crate::optim::{discriminative_lrs, LrAssignment, LrFinderConfig, LrSpacing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrPolicy {
    Fixed { lr: f64 },
    Discriminative { lr_first: f64, lr_last: f64, mode: LrSpacing },
}

impl LrPolicy {
    pub fn assignment(&self, n_groups: usize) -> Result<LrAssignment, TrainError> {
        match *self {
            LrPolicy::Fixed { lr } if lr > 0.0 && lr.is_finite() => Ok(LrAssignment::uniform(lr, n_groups)),
            LrPolicy::Fixed { lr } => Err(TrainError::Config(format!("learning rate must be positive, got {lr}"))),
            LrPolicy::Discriminative { lr_first, lr_last, mode } => Ok(discriminative_lrs(lr_first, lr_last, n_groups, mode)?),
        }
    }

    /// Policy after a range-test choice `lr`: a fixed rate becomes `lr`; a
    /// discriminative range becomes `(lr/100, lr)` with the same spacing.
    pub fn with_chosen(&self, lr: f64) -> Self {
        match *self {
            LrPolicy::Fixed { .. } => LrPolicy::Fixed { lr },
            LrPolicy::Discriminative { mode, .. } => LrPolicy::Discriminative { lr_first: lr / 100.0, lr_last: lr, mode },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPlan {
    pub epochs: usize,
    pub freeze: FreezeMode,
    pub lr_policy: LrPolicy,
    /// Run the range test before this step and derive the step's rates from
    /// its result (or from an interactive choice).
    #[serde(default)]
    pub lr_find: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Square input side in pixels.
    pub image_size: usize,
    pub steps: Vec<StepPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub stages: Vec<StagePlan>,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub normalization: NormalizationStats,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    pub model: ResNetConfig,
    pub n_groups: usize,
    #[serde(default)]
    pub lr_finder: LrFinderConfig,
    /// Seconds to wait for an interactive choice before using the suggestion.
    #[serde(default = "default_lr_timeout")]
    pub lr_timeout_secs: f64,
    /// Lets a frozen body update its batchnorm running statistics.
    #[serde(default)]
    pub update_frozen_bn_stats: bool,
}

fn default_lr_timeout() -> f64 {
    300.0
}

fn step(epochs: usize, freeze: FreezeMode, lr_policy: LrPolicy, lr_find: bool) -> StepPlan {
    StepPlan { epochs, freeze, lr_policy, lr_find }
}

fn disc(lr_first: f64, lr_last: f64) -> LrPolicy {
    LrPolicy::Discriminative { lr_first, lr_last, mode: LrSpacing::Linear }
}

/// Three stages at 128, 224 and 229 pixels: head-only then whole-network
/// steps in the first two, whole-network only in the last, 41 epochs total.
/// Discriminative ranges of the first two stages come from the range test,
/// with `head rate / 10` and `/ 1000` as fallbacks.
pub fn default_protocol() -> ProtocolConfig {
    use FreezeMode::{AllTrainable, HeadOnly};
    let stages = vec![
        StagePlan {
            image_size: 128,
            steps: vec![
                step(3, HeadOnly, LrPolicy::Fixed { lr: 1e-3 }, false),
                step(5, AllTrainable, disc(1e-6, 1e-4), true),
            ],
        },
        StagePlan {
            image_size: 224,
            steps: vec![
                step(3, HeadOnly, LrPolicy::Fixed { lr: 1e-4 }, false),
                step(5, AllTrainable, disc(1e-7, 1e-5), true),
            ],
        },
        StagePlan { image_size: 229, steps: vec![step(25, AllTrainable, disc(1e-6, 1e-4), false)] },
    ];
    ProtocolConfig {
        stages,
        batch_size: 32,
        seed: 0,
        manifest: None,
        normalization: NormalizationStats::default(),
        augment: AugmentPolicy::default(),
        checkpoint_dir: None,
        model: ResNetConfig::resnet50(4),
        n_groups: 6,
        lr_finder: LrFinderConfig::default(),
        lr_timeout_secs: default_lr_timeout(),
        update_frozen_bn_stats: false,
    }
}

/// The default step structure on the mini network at 32, 48 and 64 pixels.
/// The body starts from random weights rather than pretrained ones, so every
/// rate is ten times the full-scale value and the range test is shorter.
pub fn desk_protocol() -> ProtocolConfig {
    let mut cfg = default_protocol();
    for (stage, size) in cfg.stages.iter_mut().zip([32, 48, 64]) {
        stage.image_size = size;
        for s in &mut stage.steps {
            s.lr_policy = match s.lr_policy {
                LrPolicy::Fixed { lr } => LrPolicy::Fixed { lr: lr * 10.0 },
                LrPolicy::Discriminative { lr_first, lr_last, mode } => {
                    LrPolicy::Discriminative { lr_first: lr_first * 10.0, lr_last: lr_last * 10.0, mode }
                }
            };
        }
    }
    cfg.model = ResNetConfig::mini(4);
    cfg.lr_finder = LrFinderConfig { n_iters: 30, lr_min: 1e-6, lr_max: 1.0, ..LrFinderConfig::default() };
    cfg
}

impl ProtocolConfig {
    pub fn total_epochs(&self) -> usize {
        self.stages.iter().flat_map(|s| &s.steps).map(|s| s.epochs).sum()
    }

    pub fn stage_sizes(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.image_size).collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.stages.is_empty() {
            return bad("at least one stage required".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if self.stages.windows(2).any(|w| w[1].image_size < w[0].image_size) {
            return bad(format!("stage sizes must not decrease: {:?}", self.stage_sizes()));
        }
        if self.lr_timeout_secs.is_nan() || self.lr_timeout_secs < 0.0 {
            return bad("lr timeout must be non-negative".into());
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.steps.is_empty() {
                return bad(format!("stage {i} has no steps"));
            }
            if stage.image_size == 0 {
                return bad(format!("stage {i} has zero image size"));
            }
            let first_trainable = stage.steps.iter().position(|s| s.freeze == FreezeMode::AllTrainable);
            if let Some(p) = first_trainable {
                if stage.steps[p..].iter().any(|s| s.freeze == FreezeMode::HeadOnly) {
                    return bad(format!("stage {i}: head-only steps must precede whole-network steps"));
                }
            }
            for (j, s) in stage.steps.iter().enumerate() {
                if s.epochs == 0 {
                    return bad(format!("stage {i} step {j} has zero epochs"));
                }
                s.lr_policy.assignment(self.n_groups)?;
            }
        }
        self.normalization.validate()?;
        self.augment.validate()?;
        self.lr_finder.validate()?;
        self.model.validate()?;
        Ok(())
    }
}
