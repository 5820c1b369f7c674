use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::resnet::{build_resnet, head_layers, ResNetConfig};
use super::ModelError;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    HeadOnly,
    AllTrainable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadKind {
    /// The pooling plus single linear layer the body was built with.
    Classifier,
    Replaced { n_classes: usize, seed: u64 },
}

/// Everything needed to rebuild a model's structure; weights travel
/// separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ResNetConfig,
    pub head: HeadKind,
    pub n_groups: usize,
    pub freeze: FreezeMode,
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

/// Conv/bn units applied in sequence with a relu between them, added to the
/// (optionally projected) input, then a final relu.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub units: Vec<(ConvLayer, BnLayer)>,
    pub downsample: Option<(ConvLayer, BnLayer)>,
}

#[derive(Debug, Clone)]
pub enum LayerKind {
    Conv(ConvLayer),
    BatchNorm(BnLayer),
    Relu,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    Residual(Box<ResidualBlock>),
    GlobalAvgPool,
    ConcatPool,
    Flatten,
    Dropout { p: f32 },
    Linear(LinearLayer),
}

impl LayerKind {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let conv = |c: &ConvLayer| std::iter::once(c.weight).chain(c.bias).collect::<Vec<_>>();
        let bn = |b: &BnLayer| vec![b.gamma, b.beta, b.running_mean, b.running_var];
        match self {
            LayerKind::Conv(c) => conv(c),
            LayerKind::BatchNorm(b) => bn(b),
            LayerKind::Linear(l) => std::iter::once(l.weight).chain(l.bias).collect(),
            LayerKind::Residual(block) => block
                .units
                .iter()
                .chain(&block.downsample)
                .flat_map(|(c, b)| conv(c).into_iter().chain(bn(b)))
                .collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Stem is segment 0, residual stage `s` is segment `s + 1`, the head is
    /// the last segment.
    pub segment: usize,
    pub group: usize,
}

/// Ordered layers over a named parameter table. Layers before `head_start`
/// form the body; all head parameters come after all body parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: ResNetConfig,
    params: ParamStore,
    layers: Vec<Layer>,
    head_start: usize,
    head_param_start: usize,
    head: HeadKind,
    n_groups: usize,
    freeze: FreezeMode,
    update_frozen_bn_stats: bool,
}

impl Model {
    pub(super) fn from_parts(
        config: ResNetConfig,
        params: ParamStore,
        layers: Vec<Layer>,
        head_start: usize,
        head_param_start: usize,
        head: HeadKind,
    ) -> Self {
        Self {
            config,
            params,
            layers,
            head_start,
            head_param_start,
            head,
            n_groups: 2,
            freeze: FreezeMode::AllTrainable,
            update_frozen_bn_stats: false,
        }
    }

    /// Rebuilds the structure described by `spec` with fresh weights.
    pub fn from_spec(spec: &ModelSpec) -> Result<Self, ModelError> {
        let mut model = build_resnet(spec.config.clone())?;
        if let HeadKind::Replaced { n_classes, seed } = spec.head {
            model.replace_head(n_classes, seed)?;
        }
        model.assign_layer_groups(spec.n_groups)?;
        model.set_frozen(spec.freeze);
        Ok(model)
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec { config: self.config.clone(), head: self.head.clone(), n_groups: self.n_groups, freeze: self.freeze }
    }

    pub fn config(&self) -> &ResNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head_start(&self) -> usize {
        self.head_start
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn freeze_mode(&self) -> FreezeMode {
        self.freeze
    }

    pub fn n_classes(&self) -> usize {
        match self.head {
            HeadKind::Classifier => self.config.n_classes,
            HeadKind::Replaced { n_classes, .. } => n_classes,
        }
    }

    /// Scalar weight count, buffers excluded.
    pub fn parameter_count(&self) -> usize {
        self.params.weight_count()
    }

    pub fn is_body_param(&self, id: ParamId) -> bool {
        id < self.head_param_start
    }

    /// Smallest square input the body accepts: every stage after the first
    /// halves the resolution, on top of the stem's factor of four.
    pub fn min_input(&self) -> usize {
        1 << (self.config.blocks.len() + 1)
    }

    /// Lets a frozen body keep updating batchnorm running statistics.
    pub fn set_update_frozen_bn_stats(&mut self, on: bool) {
        self.update_frozen_bn_stats = on;
    }

    /// Swaps the current head for pool → flatten → bn → dropout → linear →
    /// relu → bn → dropout → linear. Body parameters are left untouched.
    pub fn replace_head(&mut self, n_classes: usize, seed: u64) -> Result<(), ModelError> {
        if n_classes < 2 {
            return Err(ModelError::Config(format!("need at least 2 classes, got {n_classes}")));
        }
        self.layers.truncate(self.head_start);
        self.params.truncate(self.head_param_start);
        let segment = self.config.blocks.len() + 1;
        let features = self.config.feature_channels();
        let head = head_layers(&mut self.params, &self.config.head, features, n_classes, segment, seed);
        self.layers.extend(head);
        self.head = HeadKind::Replaced { n_classes, seed };
        self.assign_layer_groups(self.n_groups)?;
        self.set_frozen(self.freeze);
        Ok(())
    }

    /// Partitions layers into `n_groups` contiguous groups, the head being
    /// the last. With at most one body group per segment, segments are
    /// merged evenly; beyond that, parameterized body layers are split
    /// evenly and parameter-free layers join the group before them.
    pub fn assign_layer_groups(&mut self, n_groups: usize) -> Result<(), ModelError> {
        let n_body = self.head_start;
        let weighted = self.layers[..n_body].iter().filter(|l| !l.kind.param_ids().is_empty()).count();
        if n_groups < 2 || n_groups - 1 > weighted {
            return Err(ModelError::Config(format!(
                "n_groups must be in 2..={}, got {n_groups}",
                weighted + 1
            )));
        }
        let body_groups = n_groups - 1;
        let segments = self.config.blocks.len() + 1;
        let mut rank = 0usize;
        let mut seen = 0usize;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if !layer.kind.param_ids().is_empty() {
                rank = seen;
                seen += 1;
            }
            layer.group = if i >= n_body {
                body_groups
            } else if body_groups <= segments {
                layer.segment * body_groups / segments
            } else {
                rank * body_groups / weighted
            };
        }
        for layer in &self.layers {
            for id in layer.kind.param_ids() {
                self.params.get_mut(id).group = layer.group;
            }
        }
        self.n_groups = n_groups;
        Ok(())
    }

    /// Largest group count `assign_layer_groups` accepts.
    pub fn max_groups(&self) -> usize {
        1 + self.layers[..self.head_start].iter().filter(|l| !l.kind.param_ids().is_empty()).count()
    }

    pub fn set_frozen(&mut self, mode: FreezeMode) {
        let boundary = self.head_param_start;
        for (id, p) in self.params.iter_mut().enumerate() {
            p.frozen = mode == FreezeMode::HeadOnly && id < boundary;
        }
        self.freeze = mode;
    }

    /// Scalar weights per group.
    pub fn group_param_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_groups];
        for p in self.params.iter().filter(|p| p.role == super::ParamRole::Weight) {
            counts[p.group] += p.value.numel();
        }
        counts
    }

    /// Overwrites parameters by name. Names absent from the model are
    /// reported as an error, as are shape mismatches.
    pub fn load_named<'a>(&mut self, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<usize, ModelError> {
        let mut n = 0;
        for (name, t) in tensors {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| ModelError::Config(format!("unknown parameter {name}")))?;
            let p = self.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, got {:?}",
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(t.data());
            n += 1;
        }
        Ok(n)
    }

    /// Forward pass recording onto `g`. In train mode batchnorm layers whose
    /// parameters are trainable use batch statistics and update their running
    /// estimates; frozen ones read the running estimates.
    pub fn forward(&mut self, g: &mut Graph, x: Var, train: bool) -> Result<Var, ModelError> {
        let mut updates = Vec::new();
        let out = self.run(g, x, train, &mut updates)?;
        for (id, values) in updates {
            self.params.get_mut(id).value.data_mut().copy_from_slice(&values);
        }
        Ok(out)
    }

    /// Inference-mode logits for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::inference();
        let xv = g.leaf(x.clone());
        let out = self.run(&mut g, xv, false, &mut Vec::new())?;
        Ok(g.value(out).clone())
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 4 {
            return Err(crate::tensor::shape_err("model", format!("expected NCHW input, got {shape:?}")).into());
        }
        if shape[1] != self.config.in_channels {
            return Err(ModelError::InputChannels { expected: self.config.in_channels, actual: shape[1] });
        }
        let min = self.min_input();
        if shape[2] < min || shape[3] < min {
            return Err(ModelError::InputTooSmall { h: shape[2], w: shape[3], min });
        }
        Ok(())
    }

    fn run(&self, g: &mut Graph, x: Var, train: bool, updates: &mut Vec<(ParamId, Vec<f32>)>) -> Result<Var, ModelError> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        for layer in &self.layers {
            h = match &layer.kind {
                LayerKind::Conv(c) => self.conv(g, h, c, train)?,
                LayerKind::BatchNorm(b) => self.bn(g, h, b, train, updates)?,
                LayerKind::Relu => g.relu(h),
                &LayerKind::MaxPool { kernel, stride, padding } => g.max_pool2d(h, kernel, stride, padding)?,
                LayerKind::Residual(block) => {
                    let mut y = h;
                    for (i, (c, b)) in block.units.iter().enumerate() {
                        y = self.conv(g, y, c, train)?;
                        y = self.bn(g, y, b, train, updates)?;
                        if i + 1 < block.units.len() {
                            y = g.relu(y);
                        }
                    }
                    let skip = match &block.downsample {
                        Some((c, b)) => {
                            let s = self.conv(g, h, c, train)?;
                            self.bn(g, s, b, train, updates)?
                        }
                        None => h,
                    };
                    let sum = g.add(y, skip)?;
                    g.relu(sum)
                }
                LayerKind::GlobalAvgPool => g.global_avg_pool(h)?,
                LayerKind::ConcatPool => g.adaptive_concat_pool(h)?,
                LayerKind::Flatten => g.flatten(h)?,
                &LayerKind::Dropout { p } => g.dropout(h, p, train)?,
                LayerKind::Linear(l) => {
                    let w = self.params.bind(g, l.weight, train);
                    let b = l.bias.map(|id| self.params.bind(g, id, train));
                    g.linear(h, w, b)?
                }
            };
        }
        Ok(h)
    }

    fn conv(&self, g: &mut Graph, x: Var, c: &ConvLayer, train: bool) -> Result<Var, ModelError> {
        let w = self.params.bind(g, c.weight, train);
        let b = c.bias.map(|id| self.params.bind(g, id, train));
        Ok(g.conv2d(x, w, b, c.stride, c.padding)?)
    }

    fn bn(
        &self,
        g: &mut Graph,
        x: Var,
        b: &BnLayer,
        train: bool,
        updates: &mut Vec<(ParamId, Vec<f32>)>,
    ) -> Result<Var, ModelError> {
        let gamma = self.params.bind(g, b.gamma, train);
        let beta = self.params.bind(g, b.beta, train);
        let frozen = self.params.get(b.gamma).frozen;
        let rm = self.params.get(b.running_mean).value.data();
        let rv = self.params.get(b.running_var).value.data();
        if !train || (frozen && !self.update_frozen_bn_stats) {
            return Ok(g.batch_norm_eval(x, gamma, beta, rm, rv, b.eps)?);
        }
        let (mut rm, mut rv) = (rm.to_vec(), rv.to_vec());
        let out = g.batchnorm(x, gamma, beta, &mut rm, &mut rv, true, b.eps, b.momentum)?;
        updates.push((b.running_mean, rm));
        updates.push((b.running_var, rv));
        Ok(out)
    }
}
