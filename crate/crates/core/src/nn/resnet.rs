use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::{BnLayer, ConvLayer, HeadKind, Layer, LayerKind, LinearLayer, Model, ResidualBlock};
use super::params::{ParamRole, ParamStore};
use super::ModelError;
use crate::tensor::Tensor;

/// Replacement head settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout_first: f32,
    pub dropout_second: f32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 512, dropout_first: 0.25, dropout_second: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetConfig {
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
    /// Width of the stem and of the first stage's inner convolutions; each
    /// later stage doubles it.
    pub base_width: usize,
    pub bottleneck: bool,
    pub n_classes: usize,
    pub in_channels: usize,
    pub head: HeadConfig,
    pub seed: u64,
}

impl ResNetConfig {
    pub fn resnet50(n_classes: usize) -> Self {
        Self {
            blocks: vec![3, 4, 6, 3],
            base_width: 64,
            bottleneck: true,
            n_classes,
            in_channels: 3,
            head: HeadConfig::default(),
            seed: 0,
        }
    }

    /// One bottleneck block per stage at a quarter of the standard width.
    pub fn mini(n_classes: usize) -> Self {
        Self { blocks: vec![1, 1, 1, 1], base_width: 16, ..Self::resnet50(n_classes) }
    }

    pub fn expansion(&self) -> usize {
        if self.bottleneck { 4 } else { 1 }
    }

    /// Channels entering the head.
    pub fn feature_channels(&self) -> usize {
        (self.base_width << (self.blocks.len() - 1)) * self.expansion()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return bad(format!("block counts must be non-empty and positive, got {:?}", self.blocks));
        }
        if self.base_width == 0 || self.in_channels == 0 {
            return bad("base width and input channels must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.head.hidden == 0 {
            return bad("head hidden width must be positive".into());
        }
        for p in [self.head.dropout_first, self.head.dropout_second] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout rate {p} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

struct Builder<'a> {
    params: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    /// Kaiming-normal, fan-out mode.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> ConvLayer {
        let std = (2.0 / (cout * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..cout * cin * k * k).map(|_| normal.sample(&mut self.rng) as f32).collect();
        let w = Tensor::new(&[cout, cin, k, k], data).expect("shape matches");
        let weight = self.params.push(format!("{name}.weight"), w, ParamRole::Weight);
        ConvLayer { weight, bias: None, stride, padding }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnLayer {
        BnLayer {
            gamma: self.params.push(format!("{name}.weight"), Tensor::full(&[c], 1.0), ParamRole::Weight),
            beta: self.params.push(format!("{name}.bias"), Tensor::zeros(&[c]), ParamRole::Weight),
            running_mean: self.params.push(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamRole::Buffer),
            running_var: self.params.push(format!("{name}.running_var"), Tensor::full(&[c], 1.0), ParamRole::Buffer),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Uniform in ±1/√fan_in for both weight and bias.
    fn classifier(&mut self, name: &str, fan_in: usize, out: usize) -> LinearLayer {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = Tensor::from_fn(&[out, fan_in], |_| self.rng.random_range(-bound..bound));
        let b = Tensor::from_fn(&[out], |_| self.rng.random_range(-bound..bound));
        LinearLayer {
            weight: self.params.push(format!("{name}.weight"), w, ParamRole::Weight),
            bias: Some(self.params.push(format!("{name}.bias"), b, ParamRole::Weight)),
        }
    }

    /// Kaiming-uniform weight, zero bias.
    fn head_linear(&mut self, name: &str, fan_in: usize, out: usize) -> LinearLayer {
        let bound = (6.0 / fan_in as f32).sqrt();
        let w = Tensor::from_fn(&[out, fan_in], |_| self.rng.random_range(-bound..bound));
        LinearLayer {
            weight: self.params.push(format!("{name}.weight"), w, ParamRole::Weight),
            bias: Some(self.params.push(format!("{name}.bias"), Tensor::zeros(&[out]), ParamRole::Weight)),
        }
    }
}

fn layer(name: impl Into<String>, kind: LayerKind, segment: usize) -> Layer {
    Layer { name: name.into(), kind, segment, group: 0 }
}

/// Builds the residual body followed by the original classifier head
/// (global average pool, linear).
pub fn build_resnet(config: ResNetConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut params = ParamStore::new();
    let mut b = Builder { params: &mut params, rng: ChaCha8Rng::seed_from_u64(config.seed) };
    let mut layers = Vec::new();

    let stem = config.base_width;
    layers.push(layer("conv1", LayerKind::Conv(b.conv("conv1", config.in_channels, stem, 7, 2, 3)), 0));
    layers.push(layer("bn1", LayerKind::BatchNorm(b.bn("bn1", stem)), 0));
    layers.push(layer("relu", LayerKind::Relu, 0));
    layers.push(layer("maxpool", LayerKind::MaxPool { kernel: 3, stride: 2, padding: 1 }, 0));

    let expansion = config.expansion();
    let mut cin = stem;
    for (s, &count) in config.blocks.iter().enumerate() {
        let width = config.base_width << s;
        let cout = width * expansion;
        for i in 0..count {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            let name = format!("layer{}.{i}", s + 1);
            let mut units = Vec::new();
            if config.bottleneck {
                units.push((b.conv(&format!("{name}.conv1"), cin, width, 1, 1, 0), b.bn(&format!("{name}.bn1"), width)));
                units.push((b.conv(&format!("{name}.conv2"), width, width, 3, stride, 1), b.bn(&format!("{name}.bn2"), width)));
                units.push((b.conv(&format!("{name}.conv3"), width, cout, 1, 1, 0), b.bn(&format!("{name}.bn3"), cout)));
            } else {
                units.push((b.conv(&format!("{name}.conv1"), cin, width, 3, stride, 1), b.bn(&format!("{name}.bn1"), width)));
                units.push((b.conv(&format!("{name}.conv2"), width, cout, 3, 1, 1), b.bn(&format!("{name}.bn2"), cout)));
            }
            let downsample = (stride != 1 || cin != cout).then(|| {
                (
                    b.conv(&format!("{name}.downsample.0"), cin, cout, 1, stride, 0),
                    b.bn(&format!("{name}.downsample.1"), cout),
                )
            });
            layers.push(layer(name, LayerKind::Residual(Box::new(ResidualBlock { units, downsample })), s + 1));
            cin = cout;
        }
    }

    let head_start = layers.len();
    let head_param_start = params.len();
    let mut b = Builder { params: &mut params, rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f00d) };
    let n_segments = config.blocks.len() + 1;
    layers.push(layer("avgpool", LayerKind::GlobalAvgPool, n_segments));
    layers.push(layer("flatten", LayerKind::Flatten, n_segments));
    layers.push(layer("fc", LayerKind::Linear(b.classifier("fc", cin, config.n_classes)), n_segments));

    debug_assert_eq!(cin, config.feature_channels());
    let mut model = Model::from_parts(config, params, layers, head_start, head_param_start, HeadKind::Classifier);
    let groups = 6.min(model.max_groups());
    model.assign_layer_groups(groups)?;
    Ok(model)
}

/// Appends the replacement head layers and parameters for `features` input
/// channels.
pub(super) fn head_layers(
    params: &mut ParamStore,
    cfg: &HeadConfig,
    features: usize,
    n_classes: usize,
    segment: usize,
    seed: u64,
) -> Vec<Layer> {
    let mut b = Builder { params, rng: ChaCha8Rng::seed_from_u64(seed) };
    let pooled = 2 * features;
    vec![
        layer("head.pool", LayerKind::ConcatPool, segment),
        layer("head.flatten", LayerKind::Flatten, segment),
        layer("head.bn1", LayerKind::BatchNorm(b.bn("head.bn1", pooled)), segment),
        layer("head.drop1", LayerKind::Dropout { p: cfg.dropout_first }, segment),
        layer("head.fc1", LayerKind::Linear(b.head_linear("head.fc1", pooled, cfg.hidden)), segment),
        layer("head.relu", LayerKind::Relu, segment),
        layer("head.bn2", LayerKind::BatchNorm(b.bn("head.bn2", cfg.hidden)), segment),
        layer("head.drop2", LayerKind::Dropout { p: cfg.dropout_second }, segment),
        layer("head.fc2", LayerKind::Linear(b.head_linear("head.fc2", cfg.hidden, n_classes)), segment),
    ]
}
