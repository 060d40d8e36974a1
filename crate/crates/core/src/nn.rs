//! Masked MLP and CNN built from [`MaskedParameter`]s.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{effective_weights, MaskMode, MaskedParameter};
use crate::modreg::{
    build_group_spec_channel_blocks, build_group_spec_conv, build_group_spec_dense, GroupSpec,
};
use crate::seed::{lane, substream};
use crate::tensor::{Padding, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Cnn,
}

/// Network shape. The MLP is `flatten → hidden… → classes` with relu; the CNN
/// is `(conv k×k same → relu → 2×2 max-pool)… → flatten → hidden… → classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Dense hidden widths.
    pub hidden: Vec<usize>,
    /// Output channels of each conv block (CNN only).
    #[serde(default)]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    pub num_classes: usize,
    /// Per-example input shape, e.g. `[2, 28, 28]`.
    pub input_shape: Vec<usize>,
}

fn default_kernel() -> usize {
    3
}

impl ModelConfig {
    pub fn mlp(input_shape: &[usize], hidden: &[usize], num_classes: usize) -> Self {
        ModelConfig {
            arch: Arch::Mlp,
            hidden: hidden.to_vec(),
            conv_channels: Vec::new(),
            kernel_size: default_kernel(),
            num_classes,
            input_shape: input_shape.to_vec(),
        }
    }

    pub fn cnn(input_shape: &[usize], conv_channels: &[usize], hidden: &[usize], num_classes: usize) -> Self {
        ModelConfig {
            arch: Arch::Cnn,
            hidden: hidden.to_vec(),
            conv_channels: conv_channels.to_vec(),
            kernel_size: default_kernel(),
            num_classes,
            input_shape: input_shape.to_vec(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Checks the config and lays out every masked layer.
    pub fn layer_plan(&self) -> Result<Vec<LayerPlan>> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "model.num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!(
                "model.input_shape must be non-empty with positive entries, got {:?}",
                self.input_shape
            )));
        }
        if self.hidden.contains(&0) || self.conv_channels.contains(&0) {
            return Err(Error::Config("model layer widths must be positive".into()));
        }
        let mut plan = Vec::new();
        let mut dense_grouping = Grouping::Columns;
        let mut features = self.input_len();
        match self.arch {
            Arch::Mlp => {
                if self.hidden.is_empty() {
                    return Err(Error::Config("model.hidden needs at least one layer".into()));
                }
            }
            Arch::Cnn => {
                if self.conv_channels.is_empty() {
                    return Err(Error::Config(
                        "model.conv_channels needs at least one conv layer for arch = cnn".into(),
                    ));
                }
                let [mut channels, mut h, mut w] = self.input_shape[..] else {
                    return Err(Error::Config(format!(
                        "cnn input_shape must be [channels, height, width], got {:?}",
                        self.input_shape
                    )));
                };
                let k = self.kernel_size;
                if k.is_multiple_of(2) {
                    return Err(Error::Config(format!("model.kernel_size must be odd, got {k}")));
                }
                for (i, &out) in self.conv_channels.iter().enumerate() {
                    if h < 2 || w < 2 {
                        return Err(Error::Config(format!(
                            "conv block {} would pool a {h}x{w} map",
                            i + 1
                        )));
                    }
                    plan.push(LayerPlan {
                        name: format!("conv{}", i + 1),
                        kind: LayerKind::Conv { pool: true },
                        weight_shape: vec![out, channels, k, k],
                        grouping: Grouping::Channels,
                    });
                    channels = out;
                    h /= 2;
                    w /= 2;
                }
                dense_grouping = Grouping::ChannelBlocks {
                    channels,
                    block: h * w,
                };
                features = channels * h * w;
            }
        }
        let widths = self.hidden.iter().copied().chain([self.num_classes]);
        let last = self.hidden.len();
        for (i, out) in widths.enumerate() {
            plan.push(LayerPlan {
                name: format!("fc{}", i + 1),
                kind: LayerKind::Dense { relu: i < last },
                weight_shape: vec![out, features],
                grouping: dense_grouping,
            });
            dense_grouping = Grouping::Columns;
            features = out;
        }
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense { relu: bool },
    Conv { pool: bool },
}

/// How a layer's mask entries split into source-feature groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// Dense: one group per input column.
    Columns,
    /// Conv: one group per input channel.
    Channels,
    /// Dense after flatten: all spatial columns of a channel form one group.
    ChannelBlocks { channels: usize, block: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub name: String,
    pub kind: LayerKind,
    pub weight_shape: Vec<usize>,
    pub grouping: Grouping,
}

impl LayerPlan {
    pub fn fan_in(&self) -> usize {
        self.weight_shape[1..].iter().product()
    }

    pub fn out_features(&self) -> usize {
        self.weight_shape[0]
    }

    /// Number of source features (groups) feeding this layer.
    pub fn in_features(&self) -> usize {
        match self.grouping {
            Grouping::Columns => self.weight_shape[1],
            Grouping::Channels => self.weight_shape[1],
            Grouping::ChannelBlocks { channels, .. } => channels,
        }
    }

    pub fn group_spec(&self) -> Result<GroupSpec> {
        let s = &self.weight_shape;
        match self.grouping {
            Grouping::Columns => build_group_spec_dense(&self.name, s[0], s[1]),
            Grouping::Channels => build_group_spec_conv(&self.name, s[0], s[1], s[2], s[3]),
            Grouping::ChannelBlocks { channels, block } => {
                build_group_spec_channel_blocks(&self.name, s[0], channels, block)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedDenseLayer {
    pub param: MaskedParameter,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedConvLayer {
    pub param: MaskedParameter,
    pub bias: Tensor,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(MaskedDenseLayer),
    Conv(MaskedConvLayer),
}

impl Layer {
    pub fn param(&self) -> &MaskedParameter {
        match self {
            Layer::Dense(d) => &d.param,
            Layer::Conv(c) => &c.param,
        }
    }

    pub fn param_mut(&mut self) -> &mut MaskedParameter {
        match self {
            Layer::Dense(d) => &mut d.param,
            Layer::Conv(c) => &mut c.param,
        }
    }

    pub fn bias(&self) -> &Tensor {
        match self {
            Layer::Dense(d) => &d.bias,
            Layer::Conv(c) => &c.bias,
        }
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        match self {
            Layer::Dense(d) => &mut d.bias,
            Layer::Conv(c) => &mut c.bias,
        }
    }

    fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(d) => LayerKind::Dense {
                relu: d.activation == Activation::Relu,
            },
            Layer::Conv(c) => LayerKind::Conv { pool: c.pool },
        }
    }
}

/// Tape handles of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundLayer {
    pub weights: Var,
    pub mask_logits: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub layers: Vec<BoundLayer>,
}

impl BoundModel {
    /// `(name suffix, var)` for every parameter, in optimizer order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights, l.mask_logits, l.bias])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
}

/// Draws `U(-b, b)` with `b = sqrt(6 / fan_in)`, zero biases and mask logits
/// at the near-dense initial value.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<Model> {
    let plan = config.layer_plan()?;
    let layers = plan
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let bound = (6.0 / p.fan_in() as f64).sqrt();
            let mut rng = substream(seed, &[lane::INIT, i as u64]);
            let weights = Tensor::from_fn(&p.weight_shape, |_| {
                let u: f64 = rng.sample(Open01);
                bound * (2.0 * u - 1.0)
            });
            let param = MaskedParameter::with_initial_logits(format!("{}.weight", p.name), weights);
            let bias = Tensor::zeros(&[p.out_features()]);
            match p.kind {
                LayerKind::Dense { relu } => Layer::Dense(MaskedDenseLayer {
                    param,
                    bias,
                    activation: if relu { Activation::Relu } else { Activation::None },
                }),
                LayerKind::Conv { pool } => Layer::Conv(MaskedConvLayer { param, bias, pool }),
            }
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        layers,
    })
}

/// One layer as the forward pass sees it: effective weight and bias on a tape.
pub(crate) struct LayerView {
    pub kind: LayerKind,
    pub weight: Var,
    pub bias: Var,
}

/// Shared forward body for trained and extracted networks.
pub(crate) fn forward_layers(tape: &mut Tape, config: &ModelConfig, layers: &[LayerView], input: Var) -> Result<Var> {
    let shape = tape.value(input).shape().to_vec();
    let per_example: usize = shape.iter().skip(1).product();
    if shape.len() < 2 || per_example != config.input_len() {
        return Err(Error::dim(
            "model_forward",
            format!(
                "input {shape:?} does not match per-example shape {:?}",
                config.input_shape
            ),
        ));
    }
    let batch = shape[0];
    let mut x = match config.arch {
        Arch::Mlp => tape.reshape(input, &[batch, per_example])?,
        Arch::Cnn => {
            let mut s = vec![batch];
            s.extend(&config.input_shape);
            tape.reshape(input, &s)?
        }
    };
    for layer in layers {
        x = match layer.kind {
            LayerKind::Conv { pool } => {
                let y = tape.conv2d(x, layer.weight, Some(layer.bias), Padding::Same)?;
                let y = tape.relu(y)?;
                if pool {
                    tape.max_pool2x2(y)?
                } else {
                    y
                }
            }
            LayerKind::Dense { relu } => {
                if tape.value(x).shape().len() != 2 {
                    x = tape.reshape(x, &[batch, tape.value(x).len() / batch])?;
                }
                let y = tape.matmul_nt(x, layer.weight)?;
                let y = tape.add(y, layer.bias)?;
                if relu {
                    tape.relu(y)?
                } else {
                    y
                }
            }
        };
    }
    Ok(x)
}

impl Model {
    /// Puts every parameter on `tape`; `trainable` decides whether they
    /// receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                weights: tape.leaf(l.param().weights.clone(), trainable),
                mask_logits: tape.leaf(l.param().mask_logits.clone(), trainable),
                bias: tape.leaf(l.bias().clone(), trainable),
            })
            .collect();
        BoundModel { layers }
    }

    /// Logits `batch × classes`. In stochastic mode every masked layer draws a
    /// fresh mask from the substream `(stream, layer index)`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, input: Var, mode: &MaskMode) -> Result<Var> {
        let mut views = Vec::with_capacity(self.layers.len());
        for (i, (layer, b)) in self.layers.iter().zip(&bound.layers).enumerate() {
            let stream = match mode {
                MaskMode::Stochastic { stream, .. } | MaskMode::Relaxed { stream, .. } => *stream,
                MaskMode::Deterministic => 0,
            };
            let mut rng = substream(stream, &[lane::MASK, i as u64]);
            let weight = effective_weights(tape, b.weights, b.mask_logits, mode, &mut rng)?;
            views.push(LayerView {
                kind: layer.kind(),
                weight,
                bias: b.bias,
            });
        }
        forward_layers(tape, &self.config, &views, input)
    }

    /// Deterministic-mask logits for a batch of inputs, chunked, without
    /// gradient bookkeeping.
    pub fn predict_logits(&self, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        self.predict_logits_prefix(inputs, n, chunk)
    }

    /// [`Model::predict_logits`] on the first `rows` inputs only.
    pub fn predict_logits_prefix(&self, inputs: &Tensor, rows: usize, chunk: usize) -> Result<Tensor> {
        predict_in_chunks(inputs, rows, chunk, self.config.num_classes, |tape, x| {
            let bound = self.bind(tape, false);
            self.forward(tape, &bound, x, &MaskMode::Deterministic)
        })
    }

    /// `(name, tensor)` for weights, mask logits and bias of every layer.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (plan_name, l) in self.layer_names().into_iter().zip(&self.layers) {
            out.push((format!("{plan_name}.weight"), &l.param().weights));
            out.push((format!("{plan_name}.mask_logits"), &l.param().mask_logits));
            out.push((format!("{plan_name}.bias"), l.bias()));
        }
        out
    }

    /// Mutable parameters in the same order as [`Model::named_parameters`] and
    /// [`BoundModel::vars`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense(d) => {
                    out.push(&mut d.param.weights);
                    out.push(&mut d.param.mask_logits);
                    out.push(&mut d.bias);
                }
                Layer::Conv(c) => {
                    out.push(&mut c.param.weights);
                    out.push(&mut c.param.mask_logits);
                    out.push(&mut c.bias);
                }
            }
        }
        out
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|l| l.param().name.trim_end_matches(".weight").to_string())
            .collect()
    }

    /// Fraction of mask logits above zero, per layer.
    pub fn mask_densities(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| {
                let logits = l.param().mask_logits.data();
                logits.iter().filter(|&&v| v > 0.0).count() as f64 / logits.len() as f64
            })
            .collect()
    }

    /// Alive fraction over all mask entries of the network.
    pub fn mean_mask_density(&self) -> f64 {
        let (alive, total) = self.layers.iter().fold((0usize, 0usize), |(a, t), l| {
            let logits = l.param().mask_logits.data();
            (a + logits.iter().filter(|&&v| v > 0.0).count(), t + logits.len())
        });
        alive as f64 / total as f64
    }
}

pub(crate) fn predict_in_chunks(
    inputs: &Tensor,
    n: usize,
    chunk: usize,
    classes: usize,
    mut run: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<Tensor> {
    let available = *inputs
        .shape()
        .first()
        .ok_or_else(|| Error::dim("predict", "inputs need a batch dimension"))?;
    if n == 0 || n > available {
        return Err(Error::dim("predict", format!("{n} rows requested, inputs hold {available}")));
    }
    let chunk = chunk.max(1);
    let mut data = Vec::with_capacity(n * classes);
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        let mut tape = Tape::new();
        let x = tape.constant(inputs.rows(start, len)?);
        let logits = run(&mut tape, x)?;
        data.extend_from_slice(tape.value(logits).data());
        start += len;
    }
    Tensor::new(vec![n, classes], data)
}

/// `weight_decay · (Σ w² + Σ b²)` over raw weights and biases; mask logits are
/// not part of it.
pub fn l2_penalty(tape: &mut Tape, bound: &BoundModel, weight_decay: f64) -> Result<Var> {
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::Config(format!(
            "weight_decay must be finite and >= 0, got {weight_decay}"
        )));
    }
    let mut total: Option<Var> = None;
    for l in &bound.layers {
        for v in [l.weights, l.bias] {
            let sq = tape.square(v)?;
            let s = tape.sum(sq)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    tape.scale(total, weight_decay)
}

/// One [`GroupSpec`] per masked layer, in layer order.
pub fn collect_group_specs(model: &Model) -> Result<Vec<GroupSpec>> {
    model.config.layer_plan()?.iter().map(LayerPlan::group_spec).collect()
}
