//! Frozen-weight two-stream layer DAG.
//!
//! A graph owns two input nodes — `appearance` (H x W x 1 x 3) and `motion`
//! (H x W x T x 2) — and an ordered layer list in which every predecessor
//! appears before its consumers, with at most one fusion layer joining the
//! two streams. The motion input is presented to the layers as an
//! H x W x 1 x 2T stacked-channel view (frame-wise u, v interleaved, which
//! is a pure reshape under the channel-fastest layout); the T x 2 shape is
//! restored on the gradients handed back to the caller.
//!
//! Supported layers: `conv2d` (cross-correlation, zero padding), `relu`,
//! `maxpool2d`, `concat_fusion`, `sum_fusion` and `fully_connected`.
//! Weights never change after construction; forward and backward are pure.

mod io;
mod ops;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::SpatiotemporalTensor;

pub use io::{load_weights, save_weights};

/// Name of the appearance input node.
pub const APPEARANCE_INPUT: &str = "appearance";
/// Name of the motion input node.
pub const MOTION_INPUT: &str = "motion";

/// Address of one feature channel at one layer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnitRef {
    pub layer: String,
    pub channel: usize,
}

impl UnitRef {
    pub fn new(layer: impl Into<String>, channel: usize) -> Self {
        Self {
            layer: layer.into(),
            channel,
        }
    }

    /// Parses the `layer:channel` form used on the command line.
    pub fn parse(text: &str) -> Result<Self> {
        let (layer, channel) = text
            .rsplit_once(':')
            .ok_or_else(|| Error::config(format!("unit must be layer:channel, got '{text}'")))?;
        let channel = channel
            .parse()
            .map_err(|_| Error::config(format!("bad channel index in unit '{text}'")))?;
        if layer.is_empty() {
            return Err(Error::config(format!("empty layer name in unit '{text}'")));
        }
        Ok(Self::new(layer, channel))
    }
}

impl std::fmt::Display for UnitRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.layer, self.channel)
    }
}

/// Structural description of one layer, without weights.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    ConcatFusion,
    SumFusion,
    FullyConnected {
        out_features: usize,
    },
}

impl LayerOp {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerOp::Conv2d { .. } => "conv2d",
            LayerOp::Relu => "relu",
            LayerOp::MaxPool2d { .. } => "maxpool2d",
            LayerOp::ConcatFusion => "concat_fusion",
            LayerOp::SumFusion => "sum_fusion",
            LayerOp::FullyConnected { .. } => "fully_connected",
        }
    }
}

/// One declared layer: a unique name, the predecessors it reads, and its op.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDecl {
    pub name: String,
    pub inputs: Vec<String>,
    pub op: LayerOp,
}

/// Structure-only network description; [`NetworkGraph::seeded_init`] or
/// [`load_weights`] turn it into a runnable graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_height: usize,
    pub input_width: usize,
    pub frames: usize,
    pub layers: Vec<LayerDecl>,
}

impl NetworkSpec {
    pub fn new(input_height: usize, input_width: usize, frames: usize) -> Self {
        Self {
            input_height,
            input_width,
            frames,
            layers: Vec::new(),
        }
    }

    pub fn conv2d(
        mut self,
        name: &str,
        input: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        self.layers.push(LayerDecl {
            name: name.to_string(),
            inputs: vec![input.to_string()],
            op: LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
            },
        });
        self
    }

    pub fn relu(mut self, name: &str, input: &str) -> Self {
        self.layers.push(LayerDecl {
            name: name.to_string(),
            inputs: vec![input.to_string()],
            op: LayerOp::Relu,
        });
        self
    }

    pub fn maxpool2d(mut self, name: &str, input: &str, window: usize, stride: usize) -> Self {
        self.layers.push(LayerDecl {
            name: name.to_string(),
            inputs: vec![input.to_string()],
            op: LayerOp::MaxPool2d { window, stride },
        });
        self
    }

    pub fn concat_fusion(mut self, name: &str, inputs: &[&str]) -> Self {
        self.layers.push(LayerDecl {
            name: name.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            op: LayerOp::ConcatFusion,
        });
        self
    }

    pub fn sum_fusion(mut self, name: &str, inputs: &[&str]) -> Self {
        self.layers.push(LayerDecl {
            name: name.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            op: LayerOp::SumFusion,
        });
        self
    }

    pub fn fully_connected(mut self, name: &str, input: &str, out_features: usize) -> Self {
        self.layers.push(LayerDecl {
            name: name.to_string(),
            inputs: vec![input.to_string()],
            op: LayerOp::FullyConnected { out_features },
        });
        self
    }

    pub fn from_kv_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        io::spec_from_kv_file(path.as_ref())
    }

    pub fn to_kv_text(&self) -> String {
        io::spec_to_kv_text(self)
    }
}

/// Learned parameters of a layer that has any.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LayerWeights {
    None,
    Conv {
        /// (out_c, in_c, kh, kw), out_c-major.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Dense {
        /// (out_features, in_features), row-major.
        weights: Vec<f64>,
        bias: Vec<f64>,
        in_features: usize,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub name: String,
    pub inputs: Vec<String>,
    pub op: LayerOp,
    pub weights: LayerWeights,
}

/// Spatial geometry cached per node: receptive-field sides, cumulative
/// stride, and whether the node is global (an fc layer or downstream of one).
#[derive(Debug, Clone, Copy)]
struct Geometry {
    rf_h: usize,
    rf_w: usize,
    jump: usize,
    global: bool,
}

/// Frozen two-stream network.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    input_height: usize,
    input_width: usize,
    frames: usize,
    layers: Vec<Layer>,
    index: HashMap<String, usize>,
    /// Output shape of every node, inputs included (motion in stacked form).
    shapes: HashMap<String, (usize, usize, usize, usize)>,
    geometry: HashMap<String, Geometry>,
}

impl NetworkGraph {
    /// Builds a graph from a spec, drawing conv and dense weights from a
    /// zero-mean normal with standard deviation sqrt(2 / fan_in) and zero
    /// biases, deterministically from the seed.
    pub fn seeded_init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, |op, in_features| match op {
            LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let fan_in = in_channels * kernel_h * kernel_w;
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let weights = (0..out_channels * fan_in)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                LayerWeights::Conv {
                    weights,
                    bias: vec![0.0; *out_channels],
                }
            }
            LayerOp::FullyConnected { out_features } => {
                let std = (2.0 / in_features as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let weights = (0..out_features * in_features)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                LayerWeights::Dense {
                    weights,
                    bias: vec![0.0; *out_features],
                    in_features,
                }
            }
            _ => LayerWeights::None,
        })
    }

    /// Builds a graph with all learnable weights at zero. Mostly useful as
    /// a shell for [`set_conv2d_weights`](Self::set_conv2d_weights) /
    /// [`set_fully_connected_weights`](Self::set_fully_connected_weights).
    pub fn zero_init(spec: &NetworkSpec) -> Result<Self> {
        Self::build(spec, |op, in_features| match op {
            LayerOp::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => LayerWeights::Conv {
                weights: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
                bias: vec![0.0; *out_channels],
            },
            LayerOp::FullyConnected { out_features } => LayerWeights::Dense {
                weights: vec![0.0; out_features * in_features],
                bias: vec![0.0; *out_features],
                in_features,
            },
            _ => LayerWeights::None,
        })
    }

    /// Shared construction path: validates the DAG, infers shapes, computes
    /// geometry, and asks `make_weights` for each layer's parameters.
    pub(crate) fn build<F>(spec: &NetworkSpec, mut make_weights: F) -> Result<Self>
    where
        F: FnMut(&LayerOp, usize) -> LayerWeights,
    {
        if spec.input_height == 0 || spec.input_width == 0 || spec.frames == 0 {
            return Err(Error::config(format!(
                "input dimensions must be positive, got {}x{} with {} frames",
                spec.input_height, spec.input_width, spec.frames
            )));
        }
        if spec.layers.is_empty() {
            return Err(Error::config("network has no layers".to_string()));
        }

        let mut shapes: HashMap<String, (usize, usize, usize, usize)> = HashMap::new();
        shapes.insert(
            APPEARANCE_INPUT.to_string(),
            (spec.input_height, spec.input_width, 1, 3),
        );
        // Stacked-channel view of the motion input.
        shapes.insert(
            MOTION_INPUT.to_string(),
            (spec.input_height, spec.input_width, 1, 2 * spec.frames),
        );

        let mut geometry: HashMap<String, Geometry> = HashMap::new();
        let unit_geometry = Geometry {
            rf_h: 1,
            rf_w: 1,
            jump: 1,
            global: false,
        };
        geometry.insert(APPEARANCE_INPUT.to_string(), unit_geometry);
        geometry.insert(MOTION_INPUT.to_string(), unit_geometry);

        // Which input stream(s) feed each node.
        let mut streams: HashMap<String, (bool, bool)> = HashMap::new();
        streams.insert(APPEARANCE_INPUT.to_string(), (true, false));
        streams.insert(MOTION_INPUT.to_string(), (false, true));
        let mut cross_fusions = 0usize;

        let mut index = HashMap::new();
        let mut layers = Vec::with_capacity(spec.layers.len());

        for decl in &spec.layers {
            let bad = |message: String| Error::InvalidNetwork {
                layer: decl.name.clone(),
                message,
            };
            if decl.name.is_empty()
                || !decl
                    .name
                    .chars()
                    .all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-' || ch == '.')
            {
                return Err(bad(format!(
                    "layer names must be non-empty [A-Za-z0-9_.-], got '{}'",
                    decl.name
                )));
            }
            if decl.name == APPEARANCE_INPUT || decl.name == MOTION_INPUT {
                return Err(bad("layer name collides with an input node".to_string()));
            }
            if index.contains_key(&decl.name) {
                return Err(bad("duplicate layer name".to_string()));
            }
            if decl.inputs.is_empty() {
                return Err(bad("layer has no inputs".to_string()));
            }
            let fusion = matches!(decl.op, LayerOp::ConcatFusion | LayerOp::SumFusion);
            if !fusion && decl.inputs.len() != 1 {
                return Err(bad(format!(
                    "{} takes exactly one input, got {}",
                    decl.op.kind_name(),
                    decl.inputs.len()
                )));
            }
            let mut in_shapes = Vec::with_capacity(decl.inputs.len());
            let mut app = false;
            let mut mot = false;
            for input in &decl.inputs {
                let shape = shapes.get(input).ok_or_else(|| {
                    bad(format!(
                        "input '{input}' is not an earlier layer or input node"
                    ))
                })?;
                in_shapes.push(*shape);
                let (a, m) = streams[input];
                app |= a;
                mot |= m;
            }
            if fusion && decl.inputs.len() >= 2 {
                let spans_both = decl.inputs.iter().map(|i| streams[i]).fold(
                    (false, false),
                    |(a1, m1), (a2, m2)| (a1 || a2, m1 || m2),
                );
                let each_single = decl
                    .inputs
                    .iter()
                    .all(|i| streams[i] != (true, true));
                if spans_both == (true, true) && each_single {
                    cross_fusions += 1;
                    if cross_fusions > 1 {
                        return Err(bad(
                            "streams may be joined by at most one fusion layer".to_string(),
                        ));
                    }
                }
            }

            let out_shape = ops::infer_shape(&decl.op, &in_shapes)
                .map_err(|message| bad(message))?;
            let in_features = {
                let (h, w, t, c) = in_shapes[0];
                h * w * t * c
            };
            let weights = make_weights(&decl.op, in_features);
            ops::validate_weights(&decl.op, &weights, in_features).map_err(|m| bad(m))?;

            let geo = {
                let preds: Vec<Geometry> = decl.inputs.iter().map(|i| geometry[i]).collect();
                let rf_h = preds.iter().map(|g| g.rf_h).max().unwrap();
                let rf_w = preds.iter().map(|g| g.rf_w).max().unwrap();
                let jump = preds.iter().map(|g| g.jump).max().unwrap();
                let global = preds.iter().any(|g| g.global);
                match decl.op {
                    LayerOp::Conv2d {
                        kernel_h,
                        kernel_w,
                        stride,
                        ..
                    } => Geometry {
                        rf_h: rf_h + (kernel_h - 1) * jump,
                        rf_w: rf_w + (kernel_w - 1) * jump,
                        jump: jump * stride,
                        global,
                    },
                    LayerOp::MaxPool2d { window, stride } => Geometry {
                        rf_h: rf_h + (window - 1) * jump,
                        rf_w: rf_w + (window - 1) * jump,
                        jump: jump * stride,
                        global,
                    },
                    LayerOp::FullyConnected { .. } => Geometry {
                        rf_h: spec.input_height,
                        rf_w: spec.input_width,
                        jump: spec.input_height,
                        global: true,
                    },
                    LayerOp::Relu | LayerOp::ConcatFusion | LayerOp::SumFusion => Geometry {
                        rf_h,
                        rf_w,
                        jump,
                        global,
                    },
                }
            };

            shapes.insert(decl.name.clone(), out_shape);
            geometry.insert(decl.name.clone(), geo);
            streams.insert(decl.name.clone(), (app, mot));
            index.insert(decl.name.clone(), layers.len());
            layers.push(Layer {
                name: decl.name.clone(),
                inputs: decl.inputs.clone(),
                op: decl.op.clone(),
                weights,
            });
        }

        Ok(Self {
            input_height: spec.input_height,
            input_width: spec.input_width,
            frames: spec.frames,
            layers,
            index,
            shapes,
            geometry,
        })
    }

    pub fn input_height(&self) -> usize {
        self.input_height
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Declared appearance input shape (H, W, 1, 3).
    pub fn appearance_shape(&self) -> (usize, usize, usize, usize) {
        (self.input_height, self.input_width, 1, 3)
    }

    /// Declared motion input shape (H, W, T, 2), before channel stacking.
    pub fn motion_shape(&self) -> (usize, usize, usize, usize) {
        (self.input_height, self.input_width, self.frames, 2)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn layer_op(&self, name: &str) -> Result<&LayerOp> {
        let at = self.layer_index(name)?;
        Ok(&self.layers[at].op)
    }

    pub fn output_shape(&self, name: &str) -> Result<(usize, usize, usize, usize)> {
        self.layer_index(name)?;
        Ok(self.shapes[name])
    }

    /// Number of output channels of a layer; the valid range of unit
    /// channel indices.
    pub fn output_channels(&self, name: &str) -> Result<usize> {
        Ok(self.output_shape(name)?.3)
    }

    fn layer_index(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownLayer {
            name: name.to_string(),
        })
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_height: self.input_height,
            input_width: self.input_width,
            frames: self.frames,
            layers: self
                .layers
                .iter()
                .map(|l| LayerDecl {
                    name: l.name.clone(),
                    inputs: l.inputs.clone(),
                    op: l.op.clone(),
                })
                .collect(),
        }
    }

    fn check_unit(&self, unit: &UnitRef) -> Result<()> {
        let channels = self
            .output_channels(&unit.layer)
            .map_err(|_| Error::UnknownUnit {
                layer: unit.layer.clone(),
                channel: unit.channel,
            })?;
        if unit.channel >= channels {
            return Err(Error::UnknownUnit {
                layer: unit.layer.clone(),
                channel: unit.channel,
            });
        }
        Ok(())
    }

    /// Replaces the weights of a conv layer. Lengths must match the declared
    /// (out_c, in_c, kh, kw) and out_c; values must be finite.
    pub fn set_conv2d_weights(&mut self, name: &str, weights: Vec<f64>, bias: Vec<f64>) -> Result<()> {
        let at = self.layer_index(name)?;
        let layer = &mut self.layers[at];
        if !weights.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue {
                context: format!("weights of layer '{name}'"),
            });
        }
        match &layer.op {
            LayerOp::Conv2d { .. } => {
                let candidate = LayerWeights::Conv { weights, bias };
                ops::validate_weights(&layer.op, &candidate, 0).map_err(|message| {
                    Error::InvalidNetwork {
                        layer: name.to_string(),
                        message,
                    }
                })?;
                layer.weights = candidate;
                Ok(())
            }
            other => Err(Error::InvalidNetwork {
                layer: name.to_string(),
                message: format!("expected conv2d, layer is {}", other.kind_name()),
            }),
        }
    }

    /// Replaces the weights of a fully connected layer.
    pub fn set_fully_connected_weights(
        &mut self,
        name: &str,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<()> {
        let at = self.layer_index(name)?;
        let in_features = {
            let input = &self.layers[at].inputs[0];
            let (h, w, t, c) = self.shapes[input];
            h * w * t * c
        };
        let layer = &mut self.layers[at];
        if !weights.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFiniteValue {
                context: format!("weights of layer '{name}'"),
            });
        }
        match &layer.op {
            LayerOp::FullyConnected { .. } => {
                let candidate = LayerWeights::Dense {
                    weights,
                    bias,
                    in_features,
                };
                ops::validate_weights(&layer.op, &candidate, in_features).map_err(|message| {
                    Error::InvalidNetwork {
                        layer: name.to_string(),
                        message,
                    }
                })?;
                layer.weights = candidate;
                Ok(())
            }
            other => Err(Error::InvalidNetwork {
                layer: name.to_string(),
                message: format!("expected fully_connected, layer is {}", other.kind_name()),
            }),
        }
    }

    fn check_input_shapes(
        &self,
        x_app: &SpatiotemporalTensor,
        x_mot: &SpatiotemporalTensor,
    ) -> Result<()> {
        let app = self.appearance_shape();
        if x_app.shape() != app {
            return Err(Error::ShapeMismatch {
                context: "appearance input",
                left: [app.0, app.1, app.2, app.3],
                right: {
                    let (h, w, t, c) = x_app.shape();
                    [h, w, t, c]
                },
            });
        }
        let mot = self.motion_shape();
        if x_mot.shape() != mot {
            return Err(Error::ShapeMismatch {
                context: "motion input",
                left: [mot.0, mot.1, mot.2, mot.3],
                right: {
                    let (h, w, t, c) = x_mot.shape();
                    [h, w, t, c]
                },
            });
        }
        Ok(())
    }

    /// Runs the forward pass and returns every layer's activation map.
    pub fn forward(
        &self,
        x_app: &SpatiotemporalTensor,
        x_mot: &SpatiotemporalTensor,
    ) -> Result<HashMap<String, SpatiotemporalTensor>> {
        self.check_input_shapes(x_app, x_mot)?;
        let stacked = self.stack_motion(x_mot)?;
        let mut values: HashMap<String, SpatiotemporalTensor> = HashMap::new();
        values.insert(APPEARANCE_INPUT.to_string(), x_app.clone());
        values.insert(MOTION_INPUT.to_string(), stacked);
        for layer in &self.layers {
            let inputs: Vec<&SpatiotemporalTensor> =
                layer.inputs.iter().map(|n| &values[n]).collect();
            let out = ops::forward_layer(&layer.op, &layer.weights, &inputs);
            values.insert(layer.name.clone(), out);
        }
        values.remove(APPEARANCE_INPUT);
        values.remove(MOTION_INPUT);
        Ok(values)
    }

    /// Motion H x W x T x 2 -> H x W x 1 x 2T stacked channels (same bytes).
    fn stack_motion(&self, x_mot: &SpatiotemporalTensor) -> Result<SpatiotemporalTensor> {
        x_mot.reshaped(self.input_height, self.input_width, 1, 2 * self.frames)
    }

    /// Gradient of `channel_sum(activation(unit.layer), unit.channel)` with
    /// respect to both inputs, by reverse accumulation through the frozen
    /// graph. ReLU gates on the forward sign (zero at exactly zero) and
    /// maxpool routes to the first maximum in row-major window order.
    pub fn input_gradient(
        &self,
        unit: &UnitRef,
        x_app: &SpatiotemporalTensor,
        x_mot: &SpatiotemporalTensor,
    ) -> Result<(SpatiotemporalTensor, SpatiotemporalTensor)> {
        let (_, g_app, g_mot) = self.forward_backward(unit, x_app, x_mot)?;
        Ok((g_app, g_mot))
    }

    /// Forward pass plus the input gradient of the unit's channel sum,
    /// sharing one set of activations. Returns (activations, grad_app,
    /// grad_mot); the motion gradient is in the original H x W x T x 2 shape.
    pub fn forward_backward(
        &self,
        unit: &UnitRef,
        x_app: &SpatiotemporalTensor,
        x_mot: &SpatiotemporalTensor,
    ) -> Result<(
        HashMap<String, SpatiotemporalTensor>,
        SpatiotemporalTensor,
        SpatiotemporalTensor,
    )> {
        self.check_unit(unit)?;
        self.check_input_shapes(x_app, x_mot)?;
        let stacked = self.stack_motion(x_mot)?;

        let mut values: HashMap<String, SpatiotemporalTensor> = HashMap::new();
        values.insert(APPEARANCE_INPUT.to_string(), x_app.clone());
        values.insert(MOTION_INPUT.to_string(), stacked);
        for layer in &self.layers {
            let inputs: Vec<&SpatiotemporalTensor> =
                layer.inputs.iter().map(|n| &values[n]).collect();
            let out = ops::forward_layer(&layer.op, &layer.weights, &inputs);
            values.insert(layer.name.clone(), out);
        }

        // Only ancestors of the target layer carry gradient.
        let target_idx = self.layer_index(&unit.layer)?;
        let mut needed: BTreeSet<String> = BTreeSet::new();
        let mut stack = vec![unit.layer.clone()];
        while let Some(name) = stack.pop() {
            if !needed.insert(name.clone()) {
                continue;
            }
            if let Some(&at) = self.index.get(&name) {
                for input in &self.layers[at].inputs {
                    stack.push(input.clone());
                }
            }
        }

        let mut grads: HashMap<String, SpatiotemporalTensor> = HashMap::new();
        let target_shape = self.shapes[&unit.layer];
        let seed = SpatiotemporalTensor::from_fn(
            target_shape.0,
            target_shape.1,
            target_shape.2,
            target_shape.3,
            |_, _, _, d| if d == unit.channel { 1.0 } else { 0.0 },
        )?;
        grads.insert(unit.layer.clone(), seed);

        for at in (0..=target_idx).rev() {
            let layer = &self.layers[at];
            if !needed.contains(&layer.name) {
                continue;
            }
            let Some(gout) = grads.remove(&layer.name) else {
                continue;
            };
            let inputs: Vec<&SpatiotemporalTensor> =
                layer.inputs.iter().map(|n| &values[n]).collect();
            let gins = ops::backward_layer(&layer.op, &layer.weights, &inputs, &gout);
            for (input_name, gin) in layer.inputs.iter().zip(gins) {
                match grads.get_mut(input_name) {
                    Some(acc) => acc.add_scaled(&gin, 1.0)?,
                    None => {
                        grads.insert(input_name.clone(), gin);
                    }
                }
            }
        }

        let g_app = match grads.remove(APPEARANCE_INPUT) {
            Some(g) => g,
            None => SpatiotemporalTensor::zeros(self.input_height, self.input_width, 1, 3)?,
        };
        let g_mot_stacked = match grads.remove(MOTION_INPUT) {
            Some(g) => g,
            None => SpatiotemporalTensor::zeros(
                self.input_height,
                self.input_width,
                1,
                2 * self.frames,
            )?,
        };
        let g_mot =
            g_mot_stacked.reshaped(self.input_height, self.input_width, self.frames, 2)?;

        values.remove(APPEARANCE_INPUT);
        values.remove(MOTION_INPUT);
        Ok((values, g_app, g_mot))
    }

    /// Side length of the square input patch that influences one output
    /// position of the layer; the full input height for global layers.
    pub fn receptive_field(&self, layer: &str) -> Result<usize> {
        self.layer_index(layer)?;
        let geo = self.geometry[layer];
        if geo.global {
            Ok(self.input_height)
        } else {
            Ok(geo.rf_h.max(geo.rf_w))
        }
    }

    /// Cumulative stride from the input to the layer; the input height for
    /// global layers. Jitter offsets are drawn from `[0, layer_stride)`.
    pub fn layer_stride(&self, layer: &str) -> Result<usize> {
        self.layer_index(layer)?;
        let geo = self.geometry[layer];
        if geo.global {
            Ok(self.input_height)
        } else {
            Ok(geo.jump)
        }
    }

    /// Records, for every unit, the maximum activation over the given inputs
    /// and all positions. Units whose maximum is not positive are stored as
    /// 1.0 and flagged so that normalizing by them stays finite.
    pub fn calibrate<'a, I>(&self, inputs: I) -> Result<CalibrationTable>
    where
        I: IntoIterator<Item = (&'a SpatiotemporalTensor, &'a SpatiotemporalTensor)>,
    {
        let mut maxima: BTreeMap<UnitRef, f64> = BTreeMap::new();
        let mut count = 0usize;
        for (x_app, x_mot) in inputs {
            count += 1;
            let acts = self.forward(x_app, x_mot)?;
            for layer in &self.layers {
                let act = &acts[&layer.name];
                let (_, _, _, c) = act.shape();
                for channel in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for &v in act.data()[channel..].iter().step_by(c) {
                        best = best.max(v);
                    }
                    let key = UnitRef::new(layer.name.clone(), channel);
                    maxima
                        .entry(key)
                        .and_modify(|m| *m = m.max(best))
                        .or_insert(best);
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptyCalibrationSet);
        }
        let mut table = CalibrationTable::new(format!("{count} calibration input(s)"));
        for (unit, max) in maxima {
            if max > 0.0 {
                table.insert(unit, max, false);
            } else {
                table.insert(unit, 1.0, true);
            }
        }
        Ok(table)
    }
}

/// Per-unit maximum activations recorded on a calibration set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationTable {
    entries: BTreeMap<UnitRef, f64>,
    flagged: BTreeSet<UnitRef>,
    pub provenance: String,
}

impl CalibrationTable {
    pub fn new(provenance: impl Into<String>) -> Self {
        Self {
            entries: BTreeMap::new(),
            flagged: BTreeSet::new(),
            provenance: provenance.into(),
        }
    }

    pub fn insert(&mut self, unit: UnitRef, amax: f64, dead: bool) {
        debug_assert!(amax > 0.0);
        if dead {
            self.flagged.insert(unit.clone());
        }
        self.entries.insert(unit, amax);
    }

    pub fn get(&self, unit: &UnitRef) -> Option<f64> {
        self.entries.get(unit).copied()
    }

    pub fn require(&self, unit: &UnitRef) -> Result<f64> {
        self.get(unit).ok_or_else(|| Error::MissingCalibration {
            layer: unit.layer.clone(),
            channel: unit.channel,
        })
    }

    pub fn is_flagged(&self, unit: &UnitRef) -> bool {
        self.flagged.contains(unit)
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&UnitRef, f64)> {
        self.entries.iter().map(|(u, &v)| (u, v))
    }

    /// Serializes as `layer/channel=amax` lines, with `dead.layer/channel=1`
    /// markers for flagged units and a `provenance=` header line.
    pub fn to_kv_text(&self) -> String {
        let mut kv = crate::kv::KvFile::new();
        kv.set("provenance", &self.provenance);
        for (unit, amax) in &self.entries {
            kv.set(format!("{}/{}", unit.layer, unit.channel), amax);
            if self.flagged.contains(unit) {
                kv.set(format!("dead.{}/{}", unit.layer, unit.channel), 1);
            }
        }
        kv.to_text()
    }

    pub fn from_kv_text(text: &str, path: &str) -> Result<Self> {
        let kv = crate::kv::KvFile::parse(text, path)?;
        let mut table = CalibrationTable::new(kv.get("provenance").unwrap_or("").to_string());
        for (key, value) in kv.entries() {
            if key == "provenance" {
                continue;
            }
            let (is_dead, unit_key) = match key.strip_prefix("dead.") {
                Some(rest) => (true, rest),
                None => (false, key.as_str()),
            };
            let (layer, channel) = unit_key.split_once('/').ok_or_else(|| {
                Error::format(path, format!("expected layer/channel key, got '{key}'"))
            })?;
            let channel: usize = channel.parse().map_err(|_| {
                Error::format(path, format!("bad channel index in key '{key}'"))
            })?;
            let unit = UnitRef::new(layer, channel);
            if is_dead {
                table.flagged.insert(unit);
            } else {
                let amax: f64 = value.parse().map_err(|_| {
                    Error::format(path, format!("bad activation value '{value}' for '{key}'"))
                })?;
                if !(amax > 0.0) || !amax.is_finite() {
                    return Err(Error::format(
                        path,
                        format!("calibration value for '{key}' must be positive, got {value}"),
                    ));
                }
                table.entries.insert(unit, amax);
            }
        }
        Ok(table)
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_kv_text())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_kv_text(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests;
