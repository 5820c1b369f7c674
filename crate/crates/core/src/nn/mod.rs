//! Residual network construction, head replacement, layer grouping and
//! freeze control.

mod model;
mod params;
mod resnet;

pub use model::{BnLayer, ConvLayer, FreezeMode, HeadKind, Layer, LayerKind, LinearLayer, Model, ModelSpec, ResidualBlock};
pub use params::{Param, ParamId, ParamRole, ParamStore};
pub use resnet::{build_resnet, HeadConfig, ResNetConfig};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input {h}x{w} is smaller than the minimum {min}x{min}")]
    InputTooSmall { h: usize, w: usize, min: usize },
    #[error("expected {expected} input channels, got {actual}")]
    InputChannels { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
