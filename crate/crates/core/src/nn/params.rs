use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Tensor};

pub type ParamId = usize;

/// Trainable weights versus state that only the forward pass updates
/// (batchnorm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
    pub group: usize,
    /// Frozen weights take part in the forward pass but are never updated.
    pub frozen: bool,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.role == ParamRole::Weight && !self.frozen
    }
}

/// Named parameter table. Ids are insertion indices and names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, role, group: 0, frozen: false });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name)
    }

    pub(crate) fn truncate(&mut self, len: usize) {
        self.params.truncate(len);
    }

    /// Number of scalar weights (buffers excluded), trainable or not.
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == ParamRole::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records parameter `id` as a leaf of `g`; it requires a gradient only
    /// when `train` is set and the parameter is trainable.
    pub fn bind(&self, g: &mut Graph, id: ParamId, train: bool) -> crate::tensor::Var {
        let p = &self.params[id];
        let leaf = Tensor::new(p.value.shape(), p.value.data().to_vec())
            .expect("parameter shapes are valid")
            .with_requires_grad(train && p.trainable());
        g.param(id, leaf)
    }

    /// Copies gradients of bound parameters out of a graph after backward.
    pub fn absorb_grads(&mut self, g: &Graph) {
        for &(id, var) in g.bindings() {
            if let Some(grad) = g.grad(var) {
                let p = &mut self.params[id];
                match p.value.grad() {
                    Some(prev) => {
                        let sum = prev.iter().zip(grad).map(|(a, b)| a + b).collect();
                        p.value.set_grad(sum).expect("gradient shape matches parameter");
                    }
                    None => p.value.set_grad(grad.to_vec()).expect("gradient shape matches parameter"),
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }
}
