//! Small classifiers with an explicit backbone/head split.
//!
//! Two architectures fill the experiment's model roles:
//!
//! - `net-a`: flatten → dense(64) → relu → dense(32) → relu → head
//! - `net-b`: conv(8, 3×3) → relu → conv(8, 3×3) → relu → flatten → dense(32) → relu → head
//!
//! A third, `linear` (flatten → head), exists for hand-checkable fixtures.
//! The head is always one dense layer producing the logits `f_l(x)`; the
//! probabilities `f(x)` are its softmax.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input shape {got:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("parameters do not match spec: {0}")]
    ParamMismatch(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("checkpoint holds {found} but {expected} was requested")]
    SpecMismatch { expected: Architecture, found: Architecture },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "net-a")]
    NetA,
    #[serde(rename = "net-b")]
    NetB,
    #[serde(rename = "linear")]
    Linear,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::NetA => "net-a",
            Architecture::NetB => "net-b",
            Architecture::Linear => "linear",
        }
    }

    /// Index of the head layer.
    pub fn head_boundary(self) -> usize {
        match self {
            Architecture::NetA => 2,
            Architecture::NetB => 3,
            Architecture::Linear => 0,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "net-a" => Ok(Architecture::NetA),
            "net-b" => Ok(Architecture::NetB),
            "linear" => Ok(Architecture::Linear),
            other => Err(ModelError::InvalidSpec(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub head_boundary: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: &'static str,
    pub kind: LayerKind,
}

impl Layer {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![out_channels, in_channels, kernel, kernel],
            LayerKind::Dense { inputs, outputs } => vec![inputs, outputs],
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv { out_channels, .. } => vec![out_channels],
            LayerKind::Dense { outputs, .. } => vec![outputs],
        }
    }

    /// Bound of the scaled uniform initialiser, `sqrt(6 / (fan_in + fan_out))`.
    pub fn init_bound(&self) -> f64 {
        let (fan_in, fan_out) = match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
            LayerKind::Dense { inputs, outputs } => (inputs, outputs),
        };
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }
}

const CONV_FILTERS: usize = 8;
const CONV_KERNEL: usize = 3;

impl ModelSpec {
    pub fn new(architecture: Architecture, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            architecture,
            input_shape,
            num_classes,
            head_boundary: architecture.head_boundary(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(ModelError::InvalidSpec("num_classes must be positive".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(ModelError::InvalidSpec("input dimensions must be positive".into()));
        }
        if self.head_boundary != self.architecture.head_boundary() {
            return Err(ModelError::InvalidSpec(format!(
                "{} has its head at layer {}, spec says {}",
                self.architecture,
                self.architecture.head_boundary(),
                self.head_boundary
            )));
        }
        if self.architecture == Architecture::NetB {
            let [_, h, w] = self.input_shape;
            if h < 2 * CONV_KERNEL - 1 || w < 2 * CONV_KERNEL - 1 {
                return Err(ModelError::InvalidSpec(format!(
                    "net-b needs inputs of at least 5×5, got {h}×{w}"
                )));
            }
        }
        Ok(())
    }

    /// Layers in forward order; the last one is the head.
    pub fn layers(&self) -> Vec<Layer> {
        let [c, h, w] = self.input_shape;
        let flat = c * h * w;
        let head = |inputs| Layer {
            name: "head",
            kind: LayerKind::Dense {
                inputs,
                outputs: self.num_classes,
            },
        };
        match self.architecture {
            Architecture::Linear => vec![head(flat)],
            Architecture::NetA => vec![
                Layer {
                    name: "fc1",
                    kind: LayerKind::Dense { inputs: flat, outputs: 64 },
                },
                Layer {
                    name: "fc2",
                    kind: LayerKind::Dense { inputs: 64, outputs: 32 },
                },
                head(32),
            ],
            Architecture::NetB => {
                let shrink = 2 * (CONV_KERNEL - 1);
                let features = CONV_FILTERS * (h - shrink) * (w - shrink);
                vec![
                    Layer {
                        name: "conv1",
                        kind: LayerKind::Conv {
                            in_channels: c,
                            out_channels: CONV_FILTERS,
                            kernel: CONV_KERNEL,
                            stride: 1,
                        },
                    },
                    Layer {
                        name: "conv2",
                        kind: LayerKind::Conv {
                            in_channels: CONV_FILTERS,
                            out_channels: CONV_FILTERS,
                            kernel: CONV_KERNEL,
                            stride: 1,
                        },
                    },
                    Layer {
                        name: "fc1",
                        kind: LayerKind::Dense {
                            inputs: features,
                            outputs: 32,
                        },
                    },
                    head(32),
                ]
            }
        }
    }

    pub fn head_layer(&self) -> Layer {
        self.layers().pop().expect("every architecture has a head")
    }

    /// Width of the backbone output that feeds the head.
    pub fn feature_dim(&self) -> usize {
        match self.head_layer().kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv { .. } => unreachable!("head is dense"),
        }
    }

    /// Names of parameters belonging to the head.
    pub fn head_param_names(&self) -> [String; 2] {
        let head = self.head_layer();
        [head.weight_name(), head.bias_name()]
    }
}

/// Named parameter tensors in layer order (weight then bias).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams(IndexMap<String, Tensor>);

impl ModelParams {
    pub fn new() -> Self {
        ModelParams(IndexMap::new())
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.0.values()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Same names, zero values.
    pub fn zeros_like(&self) -> Self {
        ModelParams(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        )
    }

    /// Rebuilds a mapping with these names from tensors in the same order.
    pub fn with_values(&self, values: Vec<Tensor>) -> Result<Self> {
        if values.len() != self.0.len() {
            return Err(ModelError::ParamMismatch(format!(
                "{} values for {} parameters",
                values.len(),
                self.0.len()
            )));
        }
        let mut out = IndexMap::with_capacity(values.len());
        for ((name, old), new) in self.0.iter().zip(values) {
            if old.shape() != new.shape() {
                return Err(ModelError::ParamMismatch(format!(
                    "{name}: shape {:?} vs {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
            out.insert(name.clone(), new);
        }
        Ok(ModelParams(out))
    }

    /// Records every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.0
            .values()
            .map(|v| {
                if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    /// Checks names, order and shapes against `spec`.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<()> {
        let expected: Vec<(String, Vec<usize>)> = spec
            .layers()
            .iter()
            .flat_map(|l| [(l.weight_name(), l.weight_shape()), (l.bias_name(), l.bias_shape())])
            .collect();
        if expected.len() != self.0.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.0.len()
            )));
        }
        for ((name, shape), (have_name, have)) in expected.iter().zip(&self.0) {
            if name != have_name || shape.as_slice() != have.shape() {
                return Err(ModelError::ParamMismatch(format!(
                    "expected {name} {shape:?}, found {have_name} {:?}",
                    have.shape()
                )));
            }
        }
        Ok(())
    }
}

fn init_layer(layer: &Layer, seed: u64) -> (Tensor, Tensor) {
    let mut rng = seed::rng(seed::hash64(seed, layer.name, 0));
    let bound = layer.init_bound();
    let shape = layer.weight_shape();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    (
        Tensor::new(shape, data).expect("finite init"),
        Tensor::zeros(&layer.bias_shape()),
    )
}

/// Scaled-uniform weights and zero biases, deterministic in `seed`.
///
/// Each layer draws from its own stream keyed by its name, so re-initialising
/// one layer with the same seed reproduces it exactly.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ModelParams {
    let mut params = ModelParams::new();
    for layer in spec.layers() {
        let (w, b) = init_layer(&layer, seed);
        params.insert(layer.weight_name(), w);
        params.insert(layer.bias_name(), b);
    }
    params
}

/// Logits for `x` of shape `[C, H, W]` (giving `[K]`) or `[B, C, H, W]`
/// (giving `[B, K]`), recorded on `x`'s tape. `params` come from
/// [`ModelParams::bind`].
pub fn forward_on_tape<'t>(spec: &ModelSpec, params: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
    let in_shape = x.shape();
    let single = in_shape.len() == 3;
    let matches = if single {
        in_shape == spec.input_shape
    } else {
        in_shape.len() == 4 && in_shape[1..] == spec.input_shape
    };
    if !matches {
        return Err(ModelError::InputShape {
            expected: spec.input_shape.to_vec(),
            got: in_shape,
        });
    }
    let layers = spec.layers();
    if params.len() != 2 * layers.len() {
        return Err(ModelError::ParamMismatch(format!(
            "{} bound tensors for {} layers",
            params.len(),
            layers.len()
        )));
    }
    let batch = if single { 1 } else { in_shape[0] };
    let mut h = if single {
        let mut s = vec![1];
        s.extend_from_slice(&spec.input_shape);
        x.reshape(&s)?
    } else {
        x
    };
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        let (w, b) = (&params[2 * i], &params[2 * i + 1]);
        h = match layer.kind {
            LayerKind::Conv { stride, .. } => h.conv2d(w, stride)?.bias_add(b)?,
            LayerKind::Dense { inputs, .. } => {
                if h.shape().len() != 2 {
                    h = h.reshape(&[batch, inputs])?;
                }
                h.matmul(w)?.bias_add(b)?
            }
        };
        if i != last {
            h = h.relu()?;
        }
    }
    if single {
        h = h.reshape(&[spec.num_classes])?;
    }
    Ok(h)
}

/// Pre-softmax outputs `f_l(x)`.
pub fn forward_logits(spec: &ModelSpec, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let xv = tape.constant(x.clone());
    Ok(forward_on_tape(spec, &bound, xv)?.value())
}

/// Argmax of the logits, ties to the lowest index.
pub fn predict(spec: &ModelSpec, params: &ModelParams, x: &Tensor) -> Result<usize> {
    Ok(forward_logits(spec, params, x)?.argmax())
}

/// Copies the backbone and re-initialises the head for `new_num_classes`.
pub fn replace_head(
    spec: &ModelSpec,
    params: &ModelParams,
    new_num_classes: usize,
    seed: u64,
) -> Result<(ModelSpec, ModelParams)> {
    params.check_against(spec)?;
    let new_spec = ModelSpec {
        num_classes: new_num_classes,
        ..spec.clone()
    };
    new_spec.validate()?;
    let head = new_spec.head_layer();
    let (w, b) = init_layer(&head, seed);
    let mut out = ModelParams::new();
    for (name, value) in params.iter() {
        if *name == head.weight_name() {
            out.insert(name.clone(), w.clone());
        } else if *name == head.bias_name() {
            out.insert(name.clone(), b.clone());
        } else {
            out.insert(name.clone(), value.clone());
        }
    }
    Ok((new_spec, out))
}

/// A spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

/// Inputs per forward pass when scoring many examples.
const EVAL_CHUNK: usize = 64;

impl Model {
    pub fn new(spec: ModelSpec, params: ModelParams) -> Result<Self> {
        spec.validate()?;
        params.check_against(&spec)?;
        Ok(Model { spec, params })
    }

    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = init_params(&spec, seed);
        Model::new(spec, params)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        forward_logits(&self.spec, &self.params, x)
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.logits(x)?.softmax()?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        predict(&self.spec, &self.params, x)
    }

    /// Logits for each input, in order.
    pub fn logits_many(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EVAL_CHUNK) {
            let batch = Tensor::stack(chunk)?;
            let logits = forward_logits(&self.spec, &self.params, &batch)?;
            out.extend(logits.unstack());
        }
        Ok(out)
    }

    pub fn predict_many(&self, inputs: &[Tensor]) -> Result<Vec<usize>> {
        Ok(self.logits_many(inputs)?.iter().map(Tensor::argmax).collect())
    }

    /// Logits recorded on `tape` with the parameters held constant.
    pub fn logits_on_tape<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let bound = self.params.bind(tape, false);
        forward_on_tape(&self.spec, &bound, x)
    }

    pub fn replace_head(&self, new_num_classes: usize, seed: u64) -> Result<Model> {
        let (spec, params) = replace_head(&self.spec, &self.params, new_num_classes, seed)?;
        Ok(Model { spec, params })
    }

    /// Parameters outside the head.
    pub fn backbone(&self) -> Vec<(&String, &Tensor)> {
        let head = self.spec.head_param_names();
        self.params.iter().filter(|(n, _)| !head.contains(n)).collect()
    }
}
