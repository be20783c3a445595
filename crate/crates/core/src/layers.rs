//! Declarative network specs and the networks built from them.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::init;
use crate::normalize::{Mode, NormState, NormalizerConfig, ReparamConfig, WaConfig};
use crate::tensor::{conv_output_extent, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Dense,
    Relu,
    Maxpool,
    /// Global average pool, `(N, C, H, W) -> (N, C)`.
    Avgpool,
    Flatten,
    ResidualBlock,
    Classifier,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Dense => "dense",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Avgpool => "avgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualBlock => "residual_block",
            LayerKind::Classifier => "classifier",
        }
    }

    fn has_weights(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::Dense | LayerKind::ResidualBlock | LayerKind::Classifier
        )
    }
}

/// One entry of a [`NetworkSpec`]. Hyperparameters that do not apply to the
/// layer kind are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
    #[serde(default)]
    pub normalizer: NormalizerConfig,
    #[serde(default)]
    pub reparameterizer: ReparamConfig,
    /// Defaults to off when the layer carries WeightAlign or a normalizer,
    /// on otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<bool>,
}

impl LayerSpec {
    fn of(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            filters: None,
            kernel: None,
            stride: None,
            padding: None,
            units: None,
            pool: None,
            normalizer: NormalizerConfig::None,
            reparameterizer: ReparamConfig::None,
            bias: None,
        }
    }

    pub fn conv(filters: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec {
            filters: Some(filters),
            kernel: Some(kernel),
            padding: Some(padding),
            ..Self::of(LayerKind::Conv)
        }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec {
            units: Some(units),
            ..Self::of(LayerKind::Dense)
        }
    }

    pub fn relu() -> Self {
        Self::of(LayerKind::Relu)
    }

    pub fn maxpool(size: usize) -> Self {
        LayerSpec {
            pool: Some(size),
            ..Self::of(LayerKind::Maxpool)
        }
    }

    pub fn avgpool() -> Self {
        Self::of(LayerKind::Avgpool)
    }

    pub fn flatten() -> Self {
        Self::of(LayerKind::Flatten)
    }

    pub fn residual(filters: usize, stride: usize) -> Self {
        LayerSpec {
            filters: Some(filters),
            stride: Some(stride),
            ..Self::of(LayerKind::ResidualBlock)
        }
    }

    pub fn classifier() -> Self {
        Self::of(LayerKind::Classifier)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride);
        self
    }

    pub fn with_normalizer(mut self, n: NormalizerConfig) -> Self {
        self.normalizer = n;
        self
    }

    pub fn with_reparam(mut self, r: ReparamConfig) -> Self {
        self.reparameterizer = r;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn bias_enabled(&self) -> bool {
        self.bias
            .unwrap_or(!self.reparameterizer.is_weight_align() && self.normalizer.is_none())
    }
}

/// Ordered layers plus input geometry; the classifier is the last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape `(C, H, W)`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkSpec {
    /// Sets normalizer and reparameterizer on every hidden weight layer.
    /// The classifier is left untouched.
    pub fn with_global(mut self, normalizer: NormalizerConfig, reparam: ReparamConfig) -> Self {
        for l in &mut self.layers {
            if matches!(l.kind, LayerKind::Conv | LayerKind::Dense | LayerKind::ResidualBlock) {
                l.normalizer = normalizer;
                l.reparameterizer = reparam;
            }
        }
        self
    }

    /// Rewrites every WeightAlign config on the network.
    pub fn map_weight_align(mut self, f: impl Fn(&mut WaConfig)) -> Self {
        for l in &mut self.layers {
            if let ReparamConfig::WeightAlign(cfg) = &mut l.reparameterizer {
                f(cfg);
            }
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Untrained probe network: `depth` 3x3 conv layers of `width` channels
    /// with ReLU between, global average pooling and a classifier.
    pub fn drift_probe(input_shape: [usize; 3], depth: usize, width: usize, classes: usize, seed: u64) -> Self {
        let mut layers = Vec::new();
        for _ in 0..depth {
            layers.push(LayerSpec::conv(width, 3, 1).with_bias(false));
            layers.push(LayerSpec::relu());
        }
        layers.push(LayerSpec::avgpool());
        layers.push(LayerSpec::classifier().with_bias(false));
        NetworkSpec {
            layers,
            input_shape,
            classes,
            seed,
        }
    }

    /// Four-conv CNN for 28x28 single-channel digits. The last conv runs on
/// 3x3 maps.
    pub fn digits_cnn(normalizer: NormalizerConfig, reparam: ReparamConfig, seed: u64) -> Self {
        let conv = |f| {
            LayerSpec::conv(f, 3, 1)
                .with_normalizer(normalizer)
                .with_reparam(reparam)
        };
        NetworkSpec {
            layers: vec![
                conv(8),
                LayerSpec::relu(),
                LayerSpec::maxpool(2),
                conv(16),
                LayerSpec::relu(),
                LayerSpec::maxpool(2),
                conv(32),
                LayerSpec::relu(),
                LayerSpec::maxpool(2),
                conv(32),
                LayerSpec::relu(),
                LayerSpec::maxpool(3),
                LayerSpec::flatten(),
                LayerSpec::classifier(),
            ],
            input_shape: [1, 28, 28],
            classes: 10,
            seed,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A trainable tensor owned by the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone)]
enum Reparam {
    None,
    Align { gamma: usize, cfg: WaConfig },
    Norm { g: usize, eps: f64 },
}

#[derive(Debug, Clone)]
enum Norm {
    None,
    Batch { gamma: usize, beta: usize, state: NormState },
    Group { gamma: usize, beta: usize, groups: usize, eps: f64 },
}

/// Conv or dense map with its reparameterizer, bias and normalizer.
#[derive(Debug, Clone)]
struct WeightLayer {
    weight: usize,
    bias: Option<usize>,
    reparam: Reparam,
    norm: Norm,
    conv: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Residual {
    a: WeightLayer,
    b: WeightLayer,
    projection: Option<WeightLayer>,
}

#[derive(Debug, Clone)]
enum Layer {
    Weight(WeightLayer),
    Relu,
    MaxPool(usize),
    AvgPool,
    Flatten,
    Residual(Box<Residual>),
}

/// Parameter leaves of one pass, index-aligned with [`Network::params`].
#[derive(Debug, Clone)]
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// A built network: parameters, normalizer state and the layer program.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
    params: Vec<Param>,
    shapes: Vec<Vec<usize>>,
}

struct Builder<'a> {
    params: &'a mut Vec<Param>,
    seed: u64,
}

impl Builder<'_> {
    fn add(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn weight_layer(
        &mut self,
        prefix: &str,
        stream: u64,
        shape: &[usize],
        bias: bool,
        normalizer: &NormalizerConfig,
        reparam: &ReparamConfig,
        conv: Option<(usize, usize)>,
    ) -> Result<WeightLayer> {
        let out = shape[0];
        let n: usize = shape[1..].iter().product();
        let w = init::kaiming_init(shape, n, &mut init::stream_rng(self.seed, stream))?;
        let weight = self.add(format!("{prefix}.weight"), w);
        let reparam = match *reparam {
            ReparamConfig::None => Reparam::None,
            ReparamConfig::WeightAlign(cfg) => Reparam::Align {
                gamma: self.add(format!("{prefix}.wa_gamma"), Tensor::full(&[out], 1.0)),
                cfg,
            },
            ReparamConfig::WeightNorm { eps } => {
                // start at the norm the initializer already produced
                let g0 = (2.0f64).sqrt();
                Reparam::Norm {
                    g: self.add(format!("{prefix}.wn_g"), Tensor::full(&[out], g0)),
                    eps,
                }
            }
        };
        let bias = bias.then(|| self.add(format!("{prefix}.bias"), Tensor::zeros(&[out])));
        let norm = match *normalizer {
            NormalizerConfig::None => Norm::None,
            NormalizerConfig::Bn { eps, momentum } => Norm::Batch {
                gamma: self.add(format!("{prefix}.norm_gamma"), Tensor::full(&[out], 1.0)),
                beta: self.add(format!("{prefix}.norm_beta"), Tensor::zeros(&[out])),
                state: NormState::new(out, momentum, eps),
            },
            other => {
                let groups = other.groups_for(out).expect("group family");
                let eps = match other {
                    NormalizerConfig::Gn { eps, .. } | NormalizerConfig::Ln { eps } | NormalizerConfig::In { eps } => eps,
                    _ => unreachable!(),
                };
                Norm::Group {
                    gamma: self.add(format!("{prefix}.norm_gamma"), Tensor::full(&[out], 1.0)),
                    beta: self.add(format!("{prefix}.norm_beta"), Tensor::zeros(&[out])),
                    groups,
                    eps,
                }
            }
        };
        Ok(WeightLayer {
            weight,
            bias,
            reparam,
            norm,
            conv,
        })
    }
}

fn layer_err(i: usize, kind: LayerKind, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("layer {i} ({}): {msg}", kind.name()))
}

impl Network {
    /// Validates the spec, allocates parameters and initializes them.
    pub fn build(spec: NetworkSpec) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if spec.classes == 0 {
            return Err(Error::Config("class count must be >= 1".into()));
        }
        if spec.input_shape.contains(&0) {
            return Err(Error::Config(format!("input shape {:?} has a zero extent", spec.input_shape)));
        }
        let last = spec.layers.len() - 1;
        for (i, l) in spec.layers.iter().enumerate() {
            if l.kind == LayerKind::Classifier && i != last {
                return Err(layer_err(i, l.kind, "the classifier must be the last layer"));
            }
            if l.kind == LayerKind::Classifier && l.reparameterizer.is_weight_align() {
                return Err(layer_err(
                    i,
                    l.kind,
                    "WeightAlign must not be applied to the final classifier layer",
                ));
            }
            if l.kind.has_weights() {
                l.reparameterizer.validate().map_err(|e| layer_err(i, l.kind, e))?;
            }
        }
        if spec.layers[last].kind != LayerKind::Classifier {
            return Err(Error::Config("the last layer must be the classifier".into()));
        }

        let mut params = Vec::new();
        let mut layers = Vec::new();
        let mut shapes = Vec::new();
        let mut shape = spec.input_shape.to_vec();
        let mut b = Builder {
            params: &mut params,
            seed: spec.seed,
        };
        for (i, l) in spec.layers.iter().enumerate() {
            let err = |msg: String| layer_err(i, l.kind, msg);
            let stream = (i as u64) << 4;
            let prefix = format!("layer{i}");
            let (layer, out_shape) = match l.kind {
                LayerKind::Conv => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(err(format!("needs (C, H, W) input, got {shape:?}")));
                    };
                    let filters = l.filters.ok_or_else(|| err("missing `filters`".into()))?;
                    let k = l.kernel.ok_or_else(|| err("missing `kernel`".into()))?;
                    let stride = l.stride.unwrap_or(1);
                    let pad = l.padding.unwrap_or(0);
                    if filters == 0 {
                        return Err(err("`filters` must be >= 1".into()));
                    }
                    let oh = conv_output_extent(h, k, stride, pad).map_err(|e| err(e.to_string()))?;
                    let ow = conv_output_extent(w, k, stride, pad).map_err(|e| err(e.to_string()))?;
                    l.normalizer.validate(filters).map_err(|e| err(e.to_string()))?;
                    let wl = b.weight_layer(
                        &prefix,
                        stream,
                        &[filters, c, k, k],
                        l.bias_enabled(),
                        &l.normalizer,
                        &l.reparameterizer,
                        Some((stride, pad)),
                    )?;
                    (Layer::Weight(wl), vec![filters, oh, ow])
                }
                LayerKind::Dense | LayerKind::Classifier => {
                    let fan_in: usize = shape.iter().product();
                    let units = if l.kind == LayerKind::Classifier {
                        spec.classes
                    } else {
                        l.units.ok_or_else(|| err("missing `units`".into()))?
                    };
                    if units == 0 {
                        return Err(err("`units` must be >= 1".into()));
                    }
                    l.normalizer.validate(units).map_err(|e| err(e.to_string()))?;
                    let wl = b.weight_layer(
                        &prefix,
                        stream,
                        &[units, fan_in],
                        l.bias_enabled(),
                        &l.normalizer,
                        &l.reparameterizer,
                        None,
                    )?;
                    (Layer::Weight(wl), vec![units])
                }
                LayerKind::Relu => (Layer::Relu, shape.clone()),
                LayerKind::Maxpool => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(err(format!("needs (C, H, W) input, got {shape:?}")));
                    };
                    let k = l.pool.unwrap_or(2);
                    if k == 0 || k > h || k > w {
                        return Err(err(format!("pool {k} does not fit {h}x{w}")));
                    }
                    (Layer::MaxPool(k), vec![c, h / k, w / k])
                }
                LayerKind::Avgpool => {
                    let &[c, _, _] = shape.as_slice() else {
                        return Err(err(format!("needs (C, H, W) input, got {shape:?}")));
                    };
                    (Layer::AvgPool, vec![c])
                }
                LayerKind::Flatten => (Layer::Flatten, vec![shape.iter().product()]),
                LayerKind::ResidualBlock => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(err(format!("needs (C, H, W) input, got {shape:?}")));
                    };
                    let filters = l.filters.ok_or_else(|| err("missing `filters`".into()))?;
                    let k = l.kernel.unwrap_or(3);
                    let stride = l.stride.unwrap_or(1);
                    let pad = l.padding.unwrap_or(k / 2);
                    let oh = conv_output_extent(h, k, stride, pad).map_err(|e| err(e.to_string()))?;
                    let ow = conv_output_extent(w, k, stride, pad).map_err(|e| err(e.to_string()))?;
                    if conv_output_extent(oh, k, 1, pad).ok() != Some(oh) {
                        return Err(err(format!("kernel {k} with padding {pad} does not preserve size")));
                    }
                    l.normalizer.validate(filters).map_err(|e| err(e.to_string()))?;
                    let bias = l.bias_enabled();
                    let a = b.weight_layer(
                        &format!("{prefix}.a"),
                        stream,
                        &[filters, c, k, k],
                        bias,
                        &l.normalizer,
                        &l.reparameterizer,
                        Some((stride, pad)),
                    )?;
                    let bb = b.weight_layer(
                        &format!("{prefix}.b"),
                        stream + 1,
                        &[filters, filters, k, k],
                        bias,
                        &l.normalizer,
                        &l.reparameterizer,
                        Some((1, pad)),
                    )?;
                    let projection = if c != filters || stride != 1 {
                        let ph = conv_output_extent(h, 1, stride, 0).map_err(|e| err(e.to_string()))?;
                        if ph != oh {
                            return Err(err("projection shortcut cannot match the branch shape".into()));
                        }
                        Some(b.weight_layer(
                            &format!("{prefix}.proj"),
                            stream + 2,
                            &[filters, c, 1, 1],
                            bias,
                            &l.normalizer,
                            &l.reparameterizer,
                            Some((stride, 0)),
                        )?)
                    } else {
                        None
                    };
                    (
                        Layer::Residual(Box::new(Residual { a, b: bb, projection })),
                        vec![filters, oh, ow],
                    )
                }
            };
            layers.push(layer);
            shapes.push(out_shape.clone());
            shape = out_shape;
        }
        Ok(Network {
            spec,
            layers,
            params,
            shapes,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-sample output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> Option<&[usize]> {
        self.shapes.get(i).map(Vec::as_slice)
    }

    /// Indices of the plain convolution layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == LayerKind::Conv)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn classifier_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Whether any layer computes statistics over activations.
    pub fn uses_sample_statistics(&self) -> bool {
        self.spec.layers.iter().any(|l| !l.normalizer.is_none())
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            nodes: self.params.iter().map(|p| g.variable(p.value.clone())).collect(),
        }
    }

    /// Records every parameter as a constant leaf.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            nodes: self.params.iter().map(|p| g.constant(p.value.clone())).collect(),
        }
    }

    fn check_input(&self, g: &Graph, x: NodeId) -> Result<()> {
        let shape = g.value(x).shape();
        if shape.len() != 4 || shape[1..] != self.spec.input_shape[..] || shape[0] == 0 {
            return Err(Error::Shape(format!(
                "network expects (N, {}, {}, {}) input, got {:?}",
                self.spec.input_shape[0], self.spec.input_shape[1], self.spec.input_shape[2], shape
            )));
        }
        Ok(())
    }

    /// Logits `(N, classes)`.
    pub fn forward(&mut self, g: &mut Graph, bound: &Bound, x: NodeId, mode: Mode) -> Result<NodeId> {
        self.check_input(g, x)?;
        let mut h = x;
        for i in 0..self.layers.len() {
            h = self.layer_forward(i, g, bound, h, mode)?;
        }
        Ok(h)
    }

    /// Logits plus every layer's output.
    pub fn forward_traced(&mut self, g: &mut Graph, bound: &Bound, x: NodeId, mode: Mode) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_input(g, x)?;
        let mut h = x;
        let mut taps = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            h = self.layer_forward(i, g, bound, h, mode)?;
            taps.push(h);
        }
        Ok((h, taps))
    }

    /// Runs layer `i` alone.
    pub fn layer_forward(&mut self, i: usize, g: &mut Graph, bound: &Bound, x: NodeId, mode: Mode) -> Result<NodeId> {
        let layer = self
            .layers
            .get_mut(i)
            .ok_or_else(|| Error::Config(format!("no layer {i}")))?;
        Ok(match layer {
            Layer::Weight(wl) => weight_forward(wl, g, bound, x, mode)?,
            Layer::Relu => g.relu(x),
            Layer::MaxPool(k) => g.max_pool(x, *k)?,
            Layer::AvgPool => g.global_avg_pool(x)?,
            Layer::Flatten => g.flatten(x)?,
            Layer::Residual(block) => residual_forward(block, g, bound, x, mode)?,
        })
    }

    /// Plain inference on a tensor, without recording parameter gradients.
    pub fn predict(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let input = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, input, mode)?;
        Ok(g.value(out).clone())
    }

    /// The weights a weight layer actually multiplies with, after any
    /// reparameterization. For residual blocks, the first conv of the branch.
    pub fn effective_weights(&self, layer: usize) -> Result<Tensor> {
        let wl = match self.layers.get(layer) {
            Some(Layer::Weight(wl)) => wl,
            Some(Layer::Residual(block)) => &block.a,
            _ => return Err(Error::Config(format!("layer {layer} has no weights"))),
        };
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let w = effective_weight_node(wl, &mut g, &bound)?;
        Ok(g.value(w).clone())
    }

    /// Raw (trainable) weights of a weight layer.
    pub fn raw_weights(&self, layer: usize) -> Result<&Tensor> {
        match self.layers.get(layer) {
            Some(Layer::Weight(wl)) => Ok(&self.params[wl.weight].value),
            Some(Layer::Residual(block)) => Ok(&self.params[block.a.weight].value),
            _ => Err(Error::Config(format!("layer {layer} has no weights"))),
        }
    }
}

fn effective_weight_node(wl: &WeightLayer, g: &mut Graph, bound: &Bound) -> Result<NodeId> {
    let w = bound.nodes[wl.weight];
    match wl.reparam {
        Reparam::None => Ok(w),
        Reparam::Align { gamma, cfg } => g.weight_align(w, bound.nodes[gamma], cfg),
        Reparam::Norm { g: scale, eps } => g.weight_norm(w, bound.nodes[scale], eps),
    }
}

fn weight_forward(wl: &mut WeightLayer, g: &mut Graph, bound: &Bound, x: NodeId, mode: Mode) -> Result<NodeId> {
    let w = effective_weight_node(wl, g, bound)?;
    let mut y = match wl.conv {
        Some((stride, pad)) => g.conv2d(x, w, stride, pad)?,
        None => {
            let flat = if g.value(x).shape().len() == 2 { x } else { g.flatten(x)? };
            g.linear(flat, w)?
        }
    };
    if let Some(b) = wl.bias {
        y = g.channel_bias(y, bound.nodes[b])?;
    }
    Ok(match &mut wl.norm {
        Norm::None => y,
        Norm::Batch { gamma, beta, state } => match mode {
            Mode::Train => g.batch_norm_train(y, bound.nodes[*gamma], bound.nodes[*beta], state)?,
            Mode::Eval => g.batch_norm_eval(y, bound.nodes[*gamma], bound.nodes[*beta], state)?,
        },
        Norm::Group { gamma, beta, groups, eps } => {
            g.group_norm(y, bound.nodes[*gamma], bound.nodes[*beta], *groups, *eps)?
        }
    })
}

fn residual_forward(block: &mut Residual, g: &mut Graph, bound: &Bound, x: NodeId, mode: Mode) -> Result<NodeId> {
    let h = weight_forward(&mut block.a, g, bound, x, mode)?;
    let h = g.relu(h);
    let branch = weight_forward(&mut block.b, g, bound, h, mode)?;
    let shortcut = match &mut block.projection {
        Some(p) => weight_forward(p, g, bound, x, mode)?,
        None => x,
    };
    let sum = g.add(branch, shortcut)?;
    Ok(g.relu(sum))
}

/// Mean softmax cross-entropy of `logits` against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, labels)?;
    g.value(loss).item()
}
