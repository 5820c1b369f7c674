//! Binary checkpoint: `SWCK`, u32 version, u64-length JSON metadata, u32
//! tensor count, then per tensor: u32 name length, name, u8 dtype, u32 rank,
//! u64 dims, u64 payload length, payload. All integers little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::ProtocolConfig;
use super::state::{Position, RunState};
use crate::nn::{Model, ModelError, ModelSpec};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SWCK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub config: AdamConfig,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub position: Position,
    pub seed: u64,
    pub adam: Option<AdamMeta>,
    pub protocol: Option<ProtocolConfig>,
    pub state: Option<RunState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Captures every model parameter (buffers included) and, if given, the
    /// optimizer moments.
    pub fn capture(model: &Model, adam: Option<&Adam>, position: Position, seed: u64) -> Self {
        let mut tensors: Vec<(String, Tensor)> =
            model.params().iter().map(|p| (p.name.clone(), plain(&p.value))).collect();
        if let Some(adam) = adam {
            let (m, v) = adam.moments();
            for (id, p) in model.params().iter().enumerate() {
                if let (Some(m), Some(v)) = (m.get(id), v.get(id)) {
                    if !m.is_empty() {
                        let shape = p.value.shape();
                        tensors.push((format!("{ADAM_M}{}", p.name), Tensor::new(shape, m.clone()).expect("moment shape")));
                        tensors.push((format!("{ADAM_V}{}", p.name), Tensor::new(shape, v.clone()).expect("moment shape")));
                    }
                }
            }
        }
        let adam = adam.map(|a| AdamMeta { config: a.config, steps: a.steps() });
        Self { meta: CheckpointMeta { model: model.spec(), position, seed, adam, protocol: None, state: None }, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Rebuilds the model structure from the spec and loads every parameter.
    pub fn restore_model(&self) -> Result<Model, CheckpointError> {
        let mut model = Model::from_spec(&self.meta.model)?;
        let params: Vec<(&str, &Tensor)> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(ADAM_M) && !n.starts_with(ADAM_V))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        if params.len() != model.params().len() {
            return Err(CheckpointError::Malformed(format!(
                "{} parameters stored, model has {}",
                params.len(),
                model.params().len()
            )));
        }
        model.load_named(params)?;
        Ok(model)
    }

    /// Optimizer state aligned to `model`'s parameter ids.
    pub fn restore_adam(&self, model: &Model) -> Option<Adam> {
        let meta = self.meta.adam?;
        let n = model.params().len();
        let (mut m, mut v) = (vec![Vec::new(); n], vec![Vec::new(); n]);
        for (id, p) in model.params().iter().enumerate() {
            if let (Some(tm), Some(tv)) = (self.tensor(&format!("{ADAM_M}{}", p.name)), self.tensor(&format!("{ADAM_V}{}", p.name))) {
                m[id] = tm.data().to_vec();
                v[id] = tv.data().to_vec();
            }
        }
        Adam::from_state(meta.config, meta.steps, m, v).ok()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((t.numel() * 4) as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| CheckpointError::Malformed(format!("metadata: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16) as usize);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::Malformed(format!("tensor {name}: unknown dtype {dtype}")));
            }
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let payload_len = r.u64("payload length")? as usize;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            if numel.and_then(|n| n.checked_mul(4)) != Some(payload_len) {
                return Err(CheckpointError::Malformed(format!("tensor {name}: payload does not match shape {shape:?}")));
            }
            let data = r
                .take(payload_len, "payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors })
    }
}

fn plain(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().to_vec()).expect("valid shape")
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.into(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, checkpoint.to_bytes()).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.into(), source })?;
    Checkpoint::from_bytes(&bytes)
}
