//! Manifest loading, image decoding, resizing, augmentation, normalization,
//! batching and the synthetic dataset generator.

mod augment;
mod batch;
mod image;
mod manifest;
mod synth;

pub use augment::{apply as apply_augment, AugmentParams, AugmentPolicy, FlipAxis};
pub use batch::{Batch, BatchOptions, Batches, Dataset};
pub use image::{decode_image, denormalize, encode_ppm, normalize, resize_bilinear, NormalizationStats};
pub use manifest::{load_manifest, DatasetManifest, Record};
pub use synth::{gen_synthetic, SynthConfig};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class table of the four-way radiograph task, in label order.
pub const CLASS_NAMES: [&str; 4] = ["Normal", "Bacterial", "Viral", "COVID-19"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {msg}")]
    Manifest { path: PathBuf, line: u64, msg: String },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("{path}: {msg}")]
    Record { path: PathBuf, msg: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }
}
