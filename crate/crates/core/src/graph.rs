//! Layer descriptors and the model graph.
//!
//! A `ModelGraph` is an ordered list of layers forming a DAG with a single
//! data input and a single logits output. Edges are expressed as input
//! references to earlier layers, so the list order is already topological.
//! Channel dependencies (which layer consumes which layer's output channels)
//! are what the pruner walks when it removes filters.

use crate::error::{CoreError, Result};
use crate::tensor::TensorRec;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LayerId = usize;

/// Where a layer reads its value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    /// The network's data input. Exactly one layer consumes it.
    Input,
    Layer(LayerId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        out_filters: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
        has_bias: bool,
    },
    /// Residual join of two equal-shape feature maps.
    Add,
    Flatten,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<Src>,
}

/// Trainable (and tracked) tensors owned by one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv {
        /// `[N, C, K, K]`: one `[C, K, K]` filter per output channel.
        weight: TensorRec,
        bias: Option<TensorRec>,
    },
    Bn {
        gamma: TensorRec,
        beta: TensorRec,
        running_mean: TensorRec,
        running_var: TensorRec,
    },
    Linear {
        /// `[out, in]`.
        weight: TensorRec,
        bias: Option<TensorRec>,
    },
}

/// Shape of a value flowing between layers, per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueShape {
    Chw(usize, usize, usize),
    Flat(usize),
}

/// Output spatial size of a conv/pool window sweep.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Kaiming-uniform with fan-in for conv/linear weights; biases zero.
    Kaiming,
    Zero,
}

#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub input_shape: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams>>,
    /// Counts parameter-mutating optimizer steps applied to this instance.
    /// Surgery and checkpoint round-trips never touch it.
    pub opt_steps: u64,
}

impl PartialEq for ModelGraph {
    fn eq(&self, other: &Self) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.params == other.params
    }
}

impl ModelGraph {
    pub fn new(input_shape: (usize, usize, usize), layers: Vec<LayerSpec>) -> Result<Self> {
        let params = layers.iter().map(zero_params).collect();
        let graph = ModelGraph {
            input_shape,
            layers,
            params,
            opt_steps: 0,
        };
        graph.validate()?;
        Ok(graph)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: LayerId) -> &LayerSpec {
        &self.layers[id]
    }

    pub fn layer_id(&self, name: &str) -> Option<LayerId> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn params(&self, id: LayerId) -> Option<&LayerParams> {
        self.params[id].as_ref()
    }

    pub fn params_mut(&mut self, id: LayerId) -> Option<&mut LayerParams> {
        self.params[id].as_mut()
    }

    pub fn set_params(&mut self, id: LayerId, p: Option<LayerParams>) {
        self.params[id] = p;
    }

    /// Conv weight tensor of layer `id`, if it is a conv.
    pub fn conv_weight(&self, id: LayerId) -> Option<&TensorRec> {
        match self.params[id].as_ref() {
            Some(LayerParams::Conv { weight, .. }) => Some(weight),
            _ => None,
        }
    }

    pub fn conv_ids(&self) -> Vec<LayerId> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        match self.infer_shapes().expect("validated graph").last() {
            Some(ValueShape::Flat(n)) => *n,
            _ => unreachable!("validated graph ends in logits"),
        }
    }

    /// For each layer, the layers that consume its output.
    pub fn consumer_map(&self) -> Vec<Vec<LayerId>> {
        let mut consumers = vec![Vec::new(); self.layers.len()];
        for (id, layer) in self.layers.iter().enumerate() {
            for src in &layer.inputs {
                if let Src::Layer(p) = src {
                    consumers[*p].push(id);
                }
            }
        }
        consumers
    }

    /// Per-layer output shape (sample-wise, batch axis excluded).
    pub fn infer_shapes(&self) -> Result<Vec<ValueShape>> {
        let mut shapes: Vec<ValueShape> = Vec::with_capacity(self.layers.len());
        let (ic, ih, iw) = self.input_shape;
        for (id, layer) in self.layers.iter().enumerate() {
            let src_shape = |s: &Src| -> ValueShape {
                match s {
                    Src::Input => ValueShape::Chw(ic, ih, iw),
                    Src::Layer(p) => shapes[*p],
                }
            };
            let mismatch = |msg: String| CoreError::ShapeMismatch {
                layer: layer.name.clone(),
                msg,
            };
            let shape = match &layer.kind {
                LayerKind::Conv2d {
                    out_filters,
                    in_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let ValueShape::Chw(c, h, w) = src_shape(&layer.inputs[0]) else {
                        return Err(mismatch("conv2d needs a CHW input".into()));
                    };
                    if c != *in_channels {
                        return Err(mismatch(format!(
                            "expects {in_channels} input channels, producer has {c}"
                        )));
                    }
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(mismatch(format!(
                            "kernel {kernel} larger than padded input {h}x{w}"
                        )));
                    }
                    ValueShape::Chw(
                        *out_filters,
                        out_extent(h, *kernel, *stride, *padding),
                        out_extent(w, *kernel, *stride, *padding),
                    )
                }
                LayerKind::BatchNorm { channels } => {
                    let ValueShape::Chw(c, h, w) = src_shape(&layer.inputs[0]) else {
                        return Err(mismatch("batchnorm needs a CHW input".into()));
                    };
                    if c != *channels {
                        return Err(mismatch(format!(
                            "normalizes {channels} channels, producer has {c}"
                        )));
                    }
                    ValueShape::Chw(c, h, w)
                }
                LayerKind::Relu => src_shape(&layer.inputs[0]),
                LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                    let ValueShape::Chw(c, h, w) = src_shape(&layer.inputs[0]) else {
                        return Err(mismatch("pooling needs a CHW input".into()));
                    };
                    if h < *kernel || w < *kernel {
                        return Err(mismatch(format!(
                            "pool kernel {kernel} larger than input {h}x{w}"
                        )));
                    }
                    ValueShape::Chw(
                        c,
                        out_extent(h, *kernel, *stride, 0),
                        out_extent(w, *kernel, *stride, 0),
                    )
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    let ValueShape::Flat(n) = src_shape(&layer.inputs[0]) else {
                        return Err(mismatch("linear needs a flattened input".into()));
                    };
                    if n != *in_features {
                        return Err(mismatch(format!(
                            "expects {in_features} input features, producer has {n}"
                        )));
                    }
                    ValueShape::Flat(*out_features)
                }
                LayerKind::Add => {
                    let a = src_shape(&layer.inputs[0]);
                    let b = src_shape(&layer.inputs[1]);
                    if a != b {
                        return Err(mismatch(format!(
                            "add-join inputs disagree: {a:?} vs {b:?}"
                        )));
                    }
                    if !matches!(a, ValueShape::Chw(..)) {
                        return Err(mismatch("add-join needs CHW inputs".into()));
                    }
                    a
                }
                LayerKind::Flatten => {
                    let ValueShape::Chw(c, h, w) = src_shape(&layer.inputs[0]) else {
                        return Err(mismatch("flatten needs a CHW input".into()));
                    };
                    ValueShape::Flat(c * h * w)
                }
            };
            let _ = id;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Structural and shape validation. Errors name the offending layer.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CoreError::InvalidGraph("graph has no layers".into()));
        }
        let mut names = std::collections::HashSet::new();
        let mut input_consumers = 0usize;
        for (id, layer) in self.layers.iter().enumerate() {
            if !names.insert(layer.name.as_str()) {
                return Err(CoreError::InvalidGraph(format!(
                    "duplicate layer name '{}'",
                    layer.name
                )));
            }
            let arity = if matches!(layer.kind, LayerKind::Add) { 2 } else { 1 };
            if layer.inputs.len() != arity {
                return Err(CoreError::InvalidGraph(format!(
                    "layer '{}' needs {arity} input(s), has {}",
                    layer.name,
                    layer.inputs.len()
                )));
            }
            for src in &layer.inputs {
                match src {
                    Src::Input => input_consumers += 1,
                    Src::Layer(p) if *p >= id => {
                        return Err(CoreError::InvalidGraph(format!(
                            "layer '{}' references layer {p}, which does not precede it",
                            layer.name
                        )));
                    }
                    Src::Layer(_) => {}
                }
            }
        }
        if input_consumers != 1 || self.layers[0].inputs != [Src::Input] {
            return Err(CoreError::InvalidGraph(
                "exactly the first layer must consume the network input".into(),
            ));
        }
        let consumers = self.consumer_map();
        let terminals: Vec<_> = (0..self.layers.len())
            .filter(|&i| consumers[i].is_empty())
            .collect();
        if terminals != [self.layers.len() - 1] {
            return Err(CoreError::InvalidGraph(format!(
                "graph must have exactly the last layer as output, found terminals {terminals:?}"
            )));
        }
        let shapes = self.infer_shapes()?;
        if !matches!(shapes.last(), Some(ValueShape::Flat(_))) {
            return Err(CoreError::InvalidGraph(
                "output layer must produce flat logits".into(),
            ));
        }
        self.validate_params()?;
        Ok(())
    }

    fn validate_params(&self) -> Result<()> {
        for (id, layer) in self.layers.iter().enumerate() {
            let expect = zero_params(layer);
            let ok = match (&expect, &self.params[id]) {
                (None, None) => true,
                (Some(a), Some(b)) => params_shape_eq(a, b),
                _ => false,
            };
            if !ok {
                return Err(CoreError::ShapeMismatch {
                    layer: layer.name.clone(),
                    msg: "parameter tensors do not match the layer description".into(),
                });
            }
        }
        Ok(())
    }

    /// Initialize parameters in graph order from a seeded generator, so a
    /// fixed seed yields bit-identical weights.
    pub fn init_params(&mut self, init: Init, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in 0..self.layers.len() {
            let Some(params) = self.params[id].as_mut() else {
                continue;
            };
            match params {
                LayerParams::Conv { weight, bias } => {
                    let fan_in: usize = weight.shape()[1..].iter().product();
                    fill(weight, init, fan_in, &mut rng);
                    if let Some(b) = bias {
                        b.data_mut().fill(0.0);
                    }
                }
                LayerParams::Linear { weight, bias } => {
                    let fan_in = weight.shape()[1];
                    fill(weight, init, fan_in, &mut rng);
                    if let Some(b) = bias {
                        b.data_mut().fill(0.0);
                    }
                }
                LayerParams::Bn {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    gamma.data_mut().fill(1.0);
                    beta.data_mut().fill(0.0);
                    running_mean.data_mut().fill(0.0);
                    running_var.data_mut().fill(1.0);
                }
            }
        }
    }

    /// Convs whose output channels can be removed by purely local surgery:
    /// the channel identity of their output must never reach an add-join,
    /// where it would be tied to another producer's width.
    pub fn structurally_prunable(&self) -> Vec<LayerId> {
        let consumers = self.consumer_map();
        self.conv_ids()
            .into_iter()
            .filter(|&id| !self.channels_reach_add(id, &consumers))
            .collect()
    }

    fn channels_reach_add(&self, conv: LayerId, consumers: &[Vec<LayerId>]) -> bool {
        let mut stack = vec![conv];
        let mut seen = vec![false; self.layers.len()];
        seen[conv] = true;
        while let Some(v) = stack.pop() {
            for &m in &consumers[v] {
                match self.layers[m].kind {
                    LayerKind::Add => return true,
                    LayerKind::Conv2d { .. } | LayerKind::Linear { .. } => {}
                    LayerKind::BatchNorm { .. }
                    | LayerKind::Relu
                    | LayerKind::MaxPool { .. }
                    | LayerKind::AvgPool { .. }
                    | LayerKind::Flatten => {
                        if !seen[m] {
                            seen[m] = true;
                            stack.push(m);
                        }
                    }
                }
            }
        }
        false
    }

    /// Default prune scope: every structurally prunable conv except the
    /// network's first conv (the stem), which is kept at full width.
    pub fn default_prune_set(&self) -> Vec<LayerId> {
        let stem = self.conv_ids().into_iter().next();
        self.structurally_prunable()
            .into_iter()
            .filter(|id| Some(*id) != stem)
            .collect()
    }

    /// Named parameter tensors in graph order, for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, &TensorRec)> {
        let mut out: Vec<(String, &TensorRec)> = Vec::new();
        for (id, layer) in self.layers.iter().enumerate() {
            let Some(params) = self.params[id].as_ref() else {
                continue;
            };
            let named: Vec<(&str, Option<&TensorRec>)> = match params {
                LayerParams::Conv { weight, bias } | LayerParams::Linear { weight, bias } => {
                    vec![("weight", Some(weight)), ("bias", bias.as_ref())]
                }
                LayerParams::Bn {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => vec![
                    ("gamma", Some(gamma)),
                    ("beta", Some(beta)),
                    ("running_mean", Some(running_mean)),
                    ("running_var", Some(running_var)),
                ],
            };
            for (suffix, tensor) in named {
                if let Some(t) = tensor {
                    out.push((format!("{}.{}", layer.name, suffix), t));
                }
            }
        }
        out
    }

    /// Replace the tensor `"<layer>.<suffix>"`; shape must match.
    pub fn set_named_tensor(&mut self, name: &str, value: TensorRec) -> Result<()> {
        let (layer_name, suffix) = name.rsplit_once('.').ok_or_else(|| {
            CoreError::CheckpointFormat(format!("malformed tensor name '{name}'"))
        })?;
        let id = self.layer_id(layer_name).ok_or_else(|| {
            CoreError::CheckpointFormat(format!("tensor '{name}' names unknown layer"))
        })?;
        let slot: &mut TensorRec = match (self.params[id].as_mut(), suffix) {
            (Some(LayerParams::Conv { weight, .. }), "weight") => weight,
            (Some(LayerParams::Conv { bias: Some(b), .. }), "bias") => b,
            (Some(LayerParams::Linear { weight, .. }), "weight") => weight,
            (Some(LayerParams::Linear { bias: Some(b), .. }), "bias") => b,
            (Some(LayerParams::Bn { gamma, .. }), "gamma") => gamma,
            (Some(LayerParams::Bn { beta, .. }), "beta") => beta,
            (Some(LayerParams::Bn { running_mean, .. }), "running_mean") => running_mean,
            (Some(LayerParams::Bn { running_var, .. }), "running_var") => running_var,
            _ => {
                return Err(CoreError::CheckpointFormat(format!(
                    "tensor '{name}' has no slot in the model"
                )))
            }
        };
        if slot.shape() != value.shape() {
            return Err(CoreError::ShapeMismatch {
                layer: layer_name.to_string(),
                msg: format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = value;
        Ok(())
    }
}

fn fill(t: &mut TensorRec, init: Init, fan_in: usize, rng: &mut ChaCha8Rng) {
    match init {
        Init::Zero => t.data_mut().fill(0.0),
        Init::Kaiming => {
            let bound = (6.0 / fan_in as f32).sqrt();
            for v in t.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
}

fn params_shape_eq(a: &LayerParams, b: &LayerParams) -> bool {
    fn opt_shape(t: &Option<TensorRec>) -> Option<&[usize]> {
        t.as_ref().map(|t| t.shape())
    }
    match (a, b) {
        (
            LayerParams::Conv { weight: w1, bias: b1 },
            LayerParams::Conv { weight: w2, bias: b2 },
        )
        | (
            LayerParams::Linear { weight: w1, bias: b1 },
            LayerParams::Linear { weight: w2, bias: b2 },
        ) => w1.shape() == w2.shape() && opt_shape(b1) == opt_shape(b2),
        (LayerParams::Bn { gamma: g1, .. }, LayerParams::Bn { gamma: g2, .. }) => {
            g1.shape() == g2.shape()
        }
        _ => false,
    }
}

/// Zero-valued parameter tensors of the right shapes for one layer.
pub fn zero_params(layer: &LayerSpec) -> Option<LayerParams> {
    match layer.kind {
        LayerKind::Conv2d {
            out_filters,
            in_channels,
            kernel,
            has_bias,
            ..
        } => Some(LayerParams::Conv {
            weight: TensorRec::zeros(&[out_filters, in_channels, kernel, kernel]),
            bias: has_bias.then(|| TensorRec::zeros(&[out_filters])),
        }),
        LayerKind::BatchNorm { channels } => Some(LayerParams::Bn {
            gamma: TensorRec::zeros(&[channels]),
            beta: TensorRec::zeros(&[channels]),
            running_mean: TensorRec::zeros(&[channels]),
            running_var: TensorRec::zeros(&[channels]),
        }),
        LayerKind::Linear {
            in_features,
            out_features,
            has_bias,
        } => Some(LayerParams::Linear {
            weight: TensorRec::zeros(&[out_features, in_features]),
            bias: has_bias.then(|| TensorRec::zeros(&[out_features])),
        }),
        _ => None,
    }
}
