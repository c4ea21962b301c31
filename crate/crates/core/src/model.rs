//! Model zoo: architectures, deterministic initialization and the flat
//! parameter index space shared by gradients, Fisher entries, scores and
//! masks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::graph::{ConvGeometry, Graph, NodeId};
use crate::objective::{forward_loss, Batch, LossGraph, Objective};
use crate::tensor::Tensor;

/// Registered architecture names.
pub const REGISTERED: [&str; 3] = ["mlp-small", "mlp-deep-narrow", "convnet-small"];

/// Hidden widths of `mlp-deep-narrow`: four wide/narrow pairs.
pub const DEEP_NARROW_WIDTHS: [usize; 8] = [256, 16, 256, 16, 256, 16, 256, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Weight,
    Bias,
}

/// Contiguous window of the flat parameter vector owned by one tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSegment {
    pub layer_name: String,
    pub offset: usize,
    pub length: usize,
    pub kind: SegmentKind,
}

impl LayerSegment {
    /// Biases are never pruned.
    pub fn prunable(&self) -> bool {
        self.kind == SegmentKind::Weight
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.length
    }
}

/// Flat parameter vector with its segment table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub segments: Vec<LayerSegment>,
}

impl ParamVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of one segment.
    pub fn segment(&self, seg: &LayerSegment) -> &[f64] {
        &self.values[seg.range()]
    }
}

/// Gradient in the parameter index space.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
    /// Number of batch gradients averaged into `values`.
    pub batch_count: usize,
}

impl GradVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Flatten,
    Relu,
    Linear { outputs: usize },
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    MaxPool { size: usize },
    /// `x + conv(x)` with a same-padded, stride-1 kernel; the add has no parameters.
    ResidualConv { kernel: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Linear { outputs } => write!(f, "linear:{outputs}"),
            LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                write!(f, "conv:{out_channels}:{kernel}:{stride}:{padding}")
            }
            LayerSpec::MaxPool { size } => write!(f, "maxpool:{size}"),
            LayerSpec::ResidualConv { kernel } => write!(f, "resconv:{kernel}"),
        }
    }
}

impl LayerSpec {
    fn parse(token: &str) -> Result<Self> {
        let parts: Vec<&str> = token.trim().split(':').collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .ok_or_else(|| Error::UnknownArchitecture(format!("layer `{token}` is missing a field")))?
                .parse()
                .map_err(|_| Error::UnknownArchitecture(format!("layer `{token}` has a non-integer field")))
        };
        let layer = match parts[0] {
            "flatten" => LayerSpec::Flatten,
            "relu" => LayerSpec::Relu,
            "linear" => LayerSpec::Linear { outputs: num(1)? },
            "conv" => LayerSpec::Conv {
                out_channels: num(1)?,
                kernel: num(2)?,
                stride: if parts.len() > 3 { num(3)? } else { 1 },
                padding: if parts.len() > 4 { num(4)? } else { 0 },
            },
            "maxpool" => LayerSpec::MaxPool { size: num(1)? },
            "resconv" => LayerSpec::ResidualConv { kernel: num(1)? },
            _ => return Err(Error::UnknownArchitecture(format!("unknown layer `{token}`"))),
        };
        Ok(layer)
    }
}

/// Named layer list bound to an input signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    /// Resolves a registered name, or an inline comma-separated layer list
    /// such as `flatten,linear:32,relu,linear:10`.
    pub fn resolve(id: &str, input_shape: [usize; 3], classes: usize) -> Result<Self> {
        let layers = match id {
            "mlp-small" => vec![
                LayerSpec::Flatten,
                LayerSpec::Linear { outputs: 64 },
                LayerSpec::Relu,
                LayerSpec::Linear { outputs: classes },
            ],
            "mlp-deep-narrow" => {
                let mut layers = vec![LayerSpec::Flatten];
                for width in DEEP_NARROW_WIDTHS {
                    layers.push(LayerSpec::Linear { outputs: width });
                    layers.push(LayerSpec::Relu);
                }
                layers.push(LayerSpec::Linear { outputs: classes });
                layers
            }
            "convnet-small" => vec![
                LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::ResidualConv { kernel: 3 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { outputs: classes },
            ],
            inline if inline.contains(':') || inline.contains(',') => {
                inline.split(',').filter(|t| !t.trim().is_empty()).map(LayerSpec::parse).collect::<Result<_>>()?
            }
            other => return Err(Error::UnknownArchitecture(other.to_string())),
        };
        Ok(ArchitectureSpec { name: id.to_string(), input_shape, classes, layers })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Resolved {
    Flatten { features: usize },
    Relu,
    Linear { inputs: usize, outputs: usize, weight: usize, bias: usize },
    Conv { shape: [usize; 4], geom: ConvGeometry, weight: usize, bias: usize },
    MaxPool { size: usize },
    ResidualConv { shape: [usize; 4], weight: usize, bias: usize },
}

/// Architecture with resolved shapes and parameter layout. Holds no values.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: ArchitectureSpec,
    layers: Vec<Resolved>,
    segments: Vec<LayerSegment>,
    /// `(segment index, fan_in)` for every weight segment.
    fan_in: Vec<(usize, usize)>,
    num_params: usize,
}

impl Network {
    pub fn new(spec: ArchitectureSpec) -> Result<Self> {
        if spec.classes < 2 {
            return Err(Error::InvalidArgument("at least two classes are required".into()));
        }
        let mut shape: Vec<usize> = spec.input_shape.to_vec();
        let mut segments = Vec::new();
        let mut fan_in = Vec::new();
        let mut offset = 0;
        let mut counters = std::collections::HashMap::<&str, usize>::new();
        let mut add_tensor = |kind: &'static str, w_len: usize, b_len: usize, fin: usize| {
            let idx = counters.entry(kind).or_insert(0);
            *idx += 1;
            let name = format!("{kind}{idx}");
            fan_in.push((segments.len(), fin));
            segments.push(LayerSegment { layer_name: name.clone(), offset, length: w_len, kind: SegmentKind::Weight });
            let weight = offset;
            offset += w_len;
            segments.push(LayerSegment { layer_name: name, offset, length: b_len, kind: SegmentKind::Bias });
            let bias = offset;
            offset += b_len;
            (weight, bias)
        };
        let mut layers = Vec::with_capacity(spec.layers.len());
        let bad = |msg: String| Error::ShapeMismatch(format!("architecture `{}`: {msg}", spec.name));
        for layer in &spec.layers {
            let resolved = match *layer {
                LayerSpec::Flatten => {
                    let features = shape.iter().product();
                    shape = vec![features];
                    Resolved::Flatten { features }
                }
                LayerSpec::Relu => Resolved::Relu,
                LayerSpec::Linear { outputs } => {
                    if shape.len() != 1 {
                        return Err(bad(format!("linear layer needs flat input, got {shape:?}")));
                    }
                    let inputs = shape[0];
                    let (weight, bias) = add_tensor("linear", inputs * outputs, outputs, inputs);
                    shape = vec![outputs];
                    Resolved::Linear { inputs, outputs, weight, bias }
                }
                LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                    if shape.len() != 3 || stride == 0 || kernel == 0 {
                        return Err(bad(format!("conv layer on {shape:?}")));
                    }
                    let (c, h, w) = (shape[0], shape[1] + 2 * padding, shape[2] + 2 * padding);
                    if h < kernel || w < kernel {
                        return Err(bad(format!("kernel {kernel} exceeds input {shape:?}")));
                    }
                    let (weight, bias) =
                        add_tensor("conv", out_channels * c * kernel * kernel, out_channels, c * kernel * kernel);
                    shape = vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
                    Resolved::Conv {
                        shape: [out_channels, c, kernel, kernel],
                        geom: ConvGeometry { stride, padding },
                        weight,
                        bias,
                    }
                }
                LayerSpec::MaxPool { size } => {
                    if shape.len() != 3 || size == 0 || shape[1] < size || shape[2] < size {
                        return Err(bad(format!("maxpool:{size} on {shape:?}")));
                    }
                    shape = vec![shape[0], shape[1] / size, shape[2] / size];
                    Resolved::MaxPool { size }
                }
                LayerSpec::ResidualConv { kernel } => {
                    if shape.len() != 3 || kernel % 2 == 0 {
                        return Err(bad(format!("resconv:{kernel} on {shape:?} (odd kernel required)")));
                    }
                    let c = shape[0];
                    let (weight, bias) = add_tensor("resconv", c * c * kernel * kernel, c, c * kernel * kernel);
                    Resolved::ResidualConv { shape: [c, c, kernel, kernel], weight, bias }
                }
            };
            layers.push(resolved);
        }
        if shape != [spec.classes] {
            return Err(bad(format!("output shape {shape:?} does not match {} classes", spec.classes)));
        }
        Ok(Network { spec, layers, segments, fan_in, num_params: offset })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn segments(&self) -> &[LayerSegment] {
        &self.segments
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.num_params];
        for &(seg_idx, fan_in) in &self.fan_in {
            let seg = &self.segments[seg_idx];
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut values[seg.range()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        values
    }

    /// Logits node for `inputs [N, C, H, W]` (or any shape with N leading and
    /// the remaining extents matching the input signature).
    pub fn record_logits(&self, graph: &mut Graph, params: &[f64], inputs: &Tensor) -> Result<NodeId> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        let per_sample: usize = self.spec.input_shape.iter().product();
        if inputs.len() != n * per_sample {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match signature {:?}",
                inputs.shape(),
                self.spec.input_shape
            )));
        }
        let [c, h, w] = self.spec.input_shape;
        let mut x = graph.constant(inputs.clone().reshape(vec![n, c, h, w])?)?;
        for layer in &self.layers {
            x = match *layer {
                Resolved::Flatten { features } => graph.reshape(x, vec![n, features])?,
                Resolved::Relu => graph.relu(x)?,
                Resolved::Linear { inputs, outputs, weight, bias } => {
                    let wn = graph.param(params, weight, vec![outputs, inputs])?;
                    let bn = graph.param(params, bias, vec![outputs])?;
                    graph.linear(x, wn, Some(bn))?
                }
                Resolved::Conv { shape, geom, weight, bias } => {
                    let wn = graph.param(params, weight, shape.to_vec())?;
                    let bn = graph.param(params, bias, vec![shape[0]])?;
                    graph.conv2d(x, wn, Some(bn), geom)?
                }
                Resolved::MaxPool { size } => graph.max_pool2d(x, size)?,
                Resolved::ResidualConv { shape, weight, bias } => {
                    let wn = graph.param(params, weight, shape.to_vec())?;
                    let bn = graph.param(params, bias, vec![shape[0]])?;
                    let geom = ConvGeometry { stride: 1, padding: shape[2] / 2 };
                    let y = graph.conv2d(x, wn, Some(bn), geom)?;
                    graph.add(x, y)?
                }
            };
        }
        Ok(x)
    }

    /// Forward pass only; returns logits `[N, classes]`.
    pub fn logits(&self, params: &[f64], inputs: &Tensor) -> Result<Tensor> {
        check_len(self.num_params, params.len())?;
        let mut graph = Graph::new(params.len());
        let out = self.record_logits(&mut graph, params, inputs)?;
        Ok(graph.value(out).clone())
    }
}

impl Objective for Network {
    fn num_params(&self) -> usize {
        self.num_params
    }

    fn record(&self, graph: &mut Graph, params: &[f64], batch: &Batch) -> Result<NodeId> {
        let logits = self.record_logits(graph, params, &batch.inputs)?;
        graph.softmax_cross_entropy(logits, &batch.labels)
    }
}

/// A network together with its current parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    network: Network,
    params: Vec<f64>,
}

pub fn build_model(arch: &ArchitectureSpec, seed: u64) -> Result<Model> {
    let network = Network::new(arch.clone())?;
    let params = network.init_params(seed);
    Ok(Model { network, params })
}

impl Model {
    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn segments(&self) -> &[LayerSegment] {
        self.network.segments()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn flatten(&self) -> ParamVector {
        ParamVector { values: self.params.clone(), segments: self.network.segments.clone() }
    }

    pub fn assign(&mut self, params: &ParamVector) -> Result<()> {
        check_len(self.params.len(), params.values.len())?;
        if params.segments != self.network.segments {
            return Err(Error::ShapeMismatch("segment table differs from the model's".into()));
        }
        self.params.copy_from_slice(&params.values);
        Ok(())
    }

    /// Overwrites the values from a raw slice of the same length.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        check_len(self.params.len(), values.len())?;
        self.params.copy_from_slice(values);
        Ok(())
    }

    pub fn forward_loss(&self, batch: &Batch) -> Result<LossGraph> {
        forward_loss(&self.network, &self.params, batch)
    }

    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        self.network.logits(&self.params, inputs)
    }
}
