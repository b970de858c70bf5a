//! Gated layers and the networks built from them.
//!
//! Every layer owns a weight tensor, an ungated bias, and a gate tensor of the
//! weight's shape. A layer whose `gated` flag is off uses its weights directly.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use crate::gates::{self, BinaryMask, DrawMode, GateTensor};
use crate::tensor::{Element, Graph, NodeId, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gate value given to fresh networks.
pub const DEFAULT_GATE_INIT: f32 = 0.6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

fn default_true() -> bool {
    true
}

/// One layer of a [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square `kernel×kernel` valid convolution, optionally followed by 2×2 max pooling.
    Conv {
        filters: usize,
        kernel: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        pool: bool,
        #[serde(default = "default_true")]
        gated: bool,
    },
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default = "default_true")]
        gated: bool,
    },
}

impl LayerSpec {
    pub fn gated(&self) -> bool {
        match self {
            LayerSpec::Conv { gated, .. } | LayerSpec::Dense { gated, .. } => *gated,
        }
    }

    fn set_gated(&mut self, on: bool) {
        match self {
            LayerSpec::Conv { gated, .. } | LayerSpec::Dense { gated, .. } => *gated = on,
        }
    }
}

/// Architecture description, serialized as JSON in checkpoints and model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Realized dimensions of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub weight: Vec<usize>,
    pub bias: usize,
    pub output: Vec<usize>,
}

impl NetworkSpec {
    /// LeNet-5 in the Caffe layout: 20 and 50 5×5 filters, then 500 and 10 units.
    pub fn lenet5() -> Self {
        Self {
            input: vec![1, 28, 28],
            layers: vec![
                LayerSpec::Conv {
                    filters: 20,
                    kernel: 5,
                    activation: Activation::None,
                    pool: true,
                    gated: true,
                },
                LayerSpec::Conv {
                    filters: 50,
                    kernel: 5,
                    activation: Activation::None,
                    pool: true,
                    gated: true,
                },
                LayerSpec::Dense {
                    units: 500,
                    activation: Activation::Relu,
                    gated: true,
                },
                LayerSpec::Dense {
                    units: 10,
                    activation: Activation::None,
                    gated: true,
                },
            ],
        }
    }

    /// Fully connected net; `dims` lists input width, hidden widths and class count.
    pub fn mlp(dims: &[usize]) -> Result<Self, ModelError> {
        if dims.len() < 2 {
            return Err(ModelError::Config(format!(
                "an MLP needs at least input and output widths, got {dims:?}"
            )));
        }
        let last = dims.len() - 2;
        let layers = dims[1..]
            .iter()
            .enumerate()
            .map(|(i, &units)| LayerSpec::Dense {
                units,
                activation: if i == last { Activation::None } else { Activation::Relu },
                gated: true,
            })
            .collect();
        let spec = Self {
            input: vec![dims[0]],
            layers,
        };
        spec.shapes()?;
        Ok(spec)
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { units, .. }) => *units,
            _ => 0,
        }
    }

    /// Turns gating on or off per layer.
    pub fn with_gating(mut self, flags: &[bool]) -> Result<Self, ModelError> {
        if flags.len() != self.layers.len() {
            return Err(ModelError::Config(format!(
                "{} gating flags for {} layers",
                flags.len(),
                self.layers.len()
            )));
        }
        for (layer, &on) in self.layers.iter_mut().zip(flags) {
            layer.set_gated(on);
        }
        Ok(self)
    }

    /// Validates the layer chain and returns every layer's dimensions.
    pub fn shapes(&self) -> Result<Vec<LayerShape>, ModelError> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(ModelError::Config(format!("invalid input shape {:?}", self.input)));
        }
        if self.layers.is_empty() {
            return Err(ModelError::Config("network has no layers".into()));
        }
        let mut current = self.input.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        let (mut convs, mut denses) = (0, 0);
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    pool,
                    ..
                } => {
                    let [c, h, w] = current[..] else {
                        return Err(ModelError::Config(format!(
                            "conv layer {idx} needs a [C, H, W] input, got {current:?}"
                        )));
                    };
                    if *filters == 0 || *kernel == 0 || *kernel > h || *kernel > w {
                        return Err(ModelError::Config(format!(
                            "conv layer {idx}: {filters} filters of size {kernel} do not fit input {current:?}"
                        )));
                    }
                    let (mut oh, mut ow) = (h - kernel + 1, w - kernel + 1);
                    if *pool {
                        oh /= 2;
                        ow /= 2;
                        if oh == 0 || ow == 0 {
                            return Err(ModelError::Config(format!(
                                "conv layer {idx}: pooling a {}x{} map leaves nothing",
                                h - kernel + 1,
                                w - kernel + 1
                            )));
                        }
                    }
                    convs += 1;
                    shapes.push(LayerShape {
                        name: format!("conv{convs}"),
                        weight: vec![*filters, c, *kernel, *kernel],
                        bias: *filters,
                        output: vec![*filters, oh, ow],
                    });
                    current = vec![*filters, oh, ow];
                }
                LayerSpec::Dense { units, .. } => {
                    if *units == 0 {
                        return Err(ModelError::Config(format!("dense layer {idx} has zero units")));
                    }
                    let fan_in: usize = current.iter().product();
                    denses += 1;
                    shapes.push(LayerShape {
                        name: format!("fc{denses}"),
                        weight: vec![*units, fan_in],
                        bias: *units,
                        output: vec![*units],
                    });
                    current = vec![*units];
                }
            }
        }
        match self.layers.last() {
            Some(LayerSpec::Dense {
                activation: Activation::None,
                ..
            }) => Ok(shapes),
            _ => Err(ModelError::Config(
                "the last layer must be a dense output layer without activation".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv { pool: bool },
}

/// Weight, bias and gates of one layer, dense (`W[out×in]`) or conv (`K[F×C×kh×kw]`).
#[derive(Debug, Clone, PartialEq)]
pub struct GatedLayer {
    pub name: String,
    pub kind: LayerKind,
    pub activation: Activation,
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub gates: GateTensor,
    pub gated: bool,
}

impl GatedLayer {
    /// Mask of surviving weights under the deterministic draw; all ones when ungated.
    pub fn ml_mask(&self) -> BinaryMask {
        if self.gated {
            gates::draw_ml(&self.gates)
        } else {
            BinaryMask::ones(self.weight.shape())
        }
    }

    /// Weights as used at test time: `W ⊙ draw_ml(g)`.
    pub fn effective_weight(&self) -> Tensor<f32> {
        if self.gated {
            gates::apply_mask(&self.weight, &self.ml_mask()).expect("gate shape equals weight shape")
        } else {
            self.weight.clone()
        }
    }
}

/// How masks are realized during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    TrainMl,
    /// Bernoulli masks, one fresh draw per layer derived from the seed.
    TrainSampled(u64),
    Eval,
}

/// Graph handles of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub weight: NodeId,
    pub bias: NodeId,
    pub gates: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub layers: Vec<LayerNodes>,
}

/// Per-layer parameter accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub weights: usize,
    pub gates: usize,
    pub masked_nonzeros: usize,
    pub sparsity_pct: f64,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    pub layers: Vec<GatedLayer>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.spec() == other.spec()
    }
}

impl Network {
    /// Glorot-uniform weights, zero biases, gates at [`DEFAULT_GATE_INIT`].
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self, ModelError> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layers
            .iter()
            .zip(shapes)
            .map(|(ls, shape)| {
                let (kind, activation) = match ls {
                    LayerSpec::Conv { pool, activation, .. } => (LayerKind::Conv { pool: *pool }, *activation),
                    LayerSpec::Dense { activation, .. } => (LayerKind::Dense, *activation),
                };
                let receptive: usize = shape.weight[2..].iter().product();
                let fan_in = shape.weight[1] * receptive;
                let fan_out = shape.weight[0] * receptive;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let weight = Tensor::from_fn(&shape.weight, |_| rng.gen_range(-bound..bound));
                GatedLayer {
                    name: shape.name,
                    kind,
                    activation,
                    gates: GateTensor::constant(&shape.weight, DEFAULT_GATE_INIT),
                    weight,
                    bias: Tensor::zeros(&[shape.bias]),
                    gated: ls.gated(),
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn lenet5(seed: u64) -> Self {
        Self::new(NetworkSpec::lenet5(), seed).expect("LeNet-5 spec is valid")
    }

    pub fn mlp(dims: &[usize], seed: u64) -> Result<Self, ModelError> {
        Self::new(NetworkSpec::mlp(dims)?, seed)
    }

    /// Reassembles a network from stored layers, checking them against the spec.
    pub fn from_parts(spec: NetworkSpec, layers: Vec<GatedLayer>) -> Result<Self, ModelError> {
        let shapes = spec.shapes()?;
        if shapes.len() != layers.len() {
            return Err(ModelError::Config(format!(
                "spec has {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (shape, layer) in shapes.iter().zip(&layers) {
            if layer.weight.shape() != shape.weight.as_slice()
                || layer.gates.shape() != shape.weight.as_slice()
                || layer.bias.len() != shape.bias
            {
                return Err(ModelError::Config(format!(
                    "layer {} does not match spec shape {:?}",
                    layer.name, shape.weight
                )));
            }
        }
        Ok(Self { spec, layers })
    }

    /// Spec reflecting the current per-layer gating flags.
    pub fn spec(&self) -> NetworkSpec {
        let flags: Vec<bool> = self.layers.iter().map(|l| l.gated).collect();
        self.spec.clone().with_gating(&flags).expect("one flag per layer")
    }

    pub fn set_gating(&mut self, flags: &[bool]) -> Result<(), ModelError> {
        if flags.len() != self.layers.len() {
            return Err(ModelError::Config(format!(
                "{} gating flags for {} layers",
                flags.len(),
                self.layers.len()
            )));
        }
        for (layer, &on) in self.layers.iter_mut().zip(flags) {
            layer.gated = on;
        }
        Ok(())
    }

    /// Sets every gate of every gated layer to `value`.
    pub fn fill_gates(&mut self, value: f32) {
        for layer in self.layers.iter_mut().filter(|l| l.gated) {
            layer.gates.fill(value);
        }
    }

    pub fn freeze_gates(&mut self, frozen: bool) {
        for layer in &mut self.layers {
            layer.gates.trainable = !frozen;
        }
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layers.iter().map(|l| l.bias.len()).sum()
    }

    pub fn gate_count(&self) -> usize {
        self.layers.iter().map(|l| l.gates.len()).sum()
    }

    /// Weights of gated layers only; the denominator of reported sparsity.
    pub fn gated_weight_count(&self) -> usize {
        self.layers.iter().filter(|l| l.gated).map(|l| l.weight.len()).sum()
    }

    /// Scalars updated by the optimizer: weights, biases and trainable gates.
    pub fn trainable_scalar_count(&self) -> usize {
        self.weight_count()
            + self.bias_count()
            + self
                .layers
                .iter()
                .filter(|l| l.gated && l.gates.trainable)
                .map(|l| l.gates.len())
                .sum::<usize>()
    }

    /// Masks for a forward pass; `None` for ungated layers.
    pub fn masks(&self, mode: ForwardMode) -> Vec<Option<BinaryMask>> {
        let mut seeds = match mode {
            ForwardMode::TrainSampled(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            _ => None,
        };
        self.layers
            .iter()
            .map(|layer| {
                if !layer.gated {
                    return None;
                }
                Some(match seeds.as_mut() {
                    Some(rng) => gates::draw(&layer.gates, DrawMode::Unbiased, rng.gen()),
                    None => gates::draw_ml(&layer.gates),
                })
            })
            .collect()
    }

    /// Thresholded masks of every layer (all ones for ungated layers).
    pub fn ml_masks(&self) -> Vec<BinaryMask> {
        self.layers.iter().map(GatedLayer::ml_mask).collect()
    }

    /// Records the forward pass on `graph` with the given masks.
    pub fn forward_graph<T: Element>(
        &self,
        graph: &mut Graph<T>,
        x: Tensor<T>,
        masks: &[Option<BinaryMask>],
    ) -> Result<ForwardNodes, ModelError> {
        if masks.len() != self.layers.len() {
            return Err(ModelError::Config(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        let x = conform_input(x, &self.spec.input)?;
        let batch = x.shape()[0];
        let mut h = graph.constant(x);
        let mut nodes = Vec::with_capacity(self.layers.len());
        for (layer, mask) in self.layers.iter().zip(masks) {
            let weight = graph.param(layer.weight.cast());
            let bias = graph.param(layer.bias.cast());
            let (effective, gate_node) = match (layer.gated, mask) {
                (true, Some(mask)) => {
                    let g = layer.gates.values().cast();
                    let gate = if layer.gates.trainable {
                        graph.param(g)
                    } else {
                        graph.constant(g)
                    };
                    let ws = gates::gated_weight(graph, weight, gate, mask)?;
                    (ws, layer.gates.trainable.then_some(gate))
                }
                (true, None) => {
                    return Err(ModelError::Config(format!("gated layer {} has no mask", layer.name)))
                }
                (false, _) => (weight, None),
            };
            h = match layer.kind {
                LayerKind::Dense => {
                    if graph.value(h).rank() != 2 {
                        let flat = graph.value(h).len() / batch;
                        h = graph.reshape(h, &[batch, flat])?;
                    }
                    graph.matmul_nt(h, effective)?
                }
                LayerKind::Conv { .. } => graph.conv2d(h, effective)?,
            };
            h = graph.add_bias(h, bias)?;
            if layer.activation == Activation::Relu {
                h = graph.relu(h);
            }
            if let LayerKind::Conv { pool: true } = layer.kind {
                h = graph.maxpool2(h)?;
            }
            nodes.push(LayerNodes {
                weight,
                bias,
                gates: gate_node,
            });
        }
        Ok(ForwardNodes {
            logits: h,
            layers: nodes,
        })
    }

    /// Logits for a batch `x[N × input...]`.
    pub fn forward(&self, x: &Tensor<f32>, mode: ForwardMode) -> Result<Tensor<f32>, ModelError> {
        let masks = self.masks(mode);
        self.forward_with_masks(x, &masks)
    }

    pub fn forward_with_masks(
        &self,
        x: &Tensor<f32>,
        masks: &[Option<BinaryMask>],
    ) -> Result<Tensor<f32>, ModelError> {
        let mut graph = Graph::<f32>::new();
        let out = self.forward_graph(&mut graph, x.clone(), masks)?;
        Ok(graph.value(out.logits).clone())
    }

    /// Per-layer weight, gate and surviving-weight counts under the thresholded masks.
    pub fn param_report(&self) -> Vec<LayerReport> {
        self.layers
            .iter()
            .map(|layer| {
                let weights = layer.weight.len();
                let masked_nonzeros = layer.ml_mask().count_ones();
                LayerReport {
                    name: layer.name.clone(),
                    weights,
                    gates: layer.gates.len(),
                    masked_nonzeros,
                    sparsity_pct: sparsity_pct(masked_nonzeros, weights),
                }
            })
            .collect()
    }

    /// Sparsity of the gated layers taken together, from the thresholded masks.
    pub fn gated_sparsity_pct(&self) -> f64 {
        let (kept, total) = self
            .layers
            .iter()
            .filter(|l| l.gated)
            .fold((0, 0), |(k, t), l| (k + l.ml_mask().count_ones(), t + l.weight.len()));
        sparsity_pct(kept, total)
    }
}

/// Reshapes `[N, ...]` to `[N, input...]` when the per-sample sizes agree,
/// so flat and image-shaped samples both feed either architecture.
pub fn conform_input<T: Element>(x: Tensor<T>, input: &[usize]) -> Result<Tensor<T>, TensorError> {
    if x.rank() < 2 || x.shape()[1..].iter().product::<usize>() != input.iter().product::<usize>() {
        return Err(TensorError::ShapeMismatch {
            op: "forward",
            left: x.shape().to_vec(),
            right: input.to_vec(),
        });
    }
    if x.shape()[1..] == *input {
        return Ok(x);
    }
    let shape: Vec<usize> = std::iter::once(x.shape()[0]).chain(input.iter().copied()).collect();
    x.reshape(&shape)
}

/// `100·(1 − kept/total)`; zero for an empty total.
pub fn sparsity_pct(kept: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * (1.0 - kept as f64 / total as f64)
    }
}
