//! Fully-connected networks with hand-written backprop, trained by SGD or
//! DP-SGD, with layer freezing.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` owns a contiguous
//! block: a `units x fan_in` row-major weight matrix followed by `units` biases.

mod net;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub use net::{example_loss, per_example_grads, Loss};
pub use train::{
    dpsgd_train, evaluate, grid_search_lr, sgd_train, train, EpochHook, LrSearch, TrainConfig,
    TrainOutcome, DEFAULT_LR_GRID,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub units: usize,
    pub activation: Activation,
    #[serde(default)]
    pub dropout_after: f64,
    #[serde(default = "yes")]
    pub trainable: bool,
}

fn yes() -> bool {
    true
}

impl LayerSpec {
    pub fn new(units: usize, activation: Activation) -> Self {
        Self {
            units,
            activation,
            dropout_after: 0.0,
            trainable: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub task: Task,
}

impl Architecture {
    /// Hidden layers with `hidden_act` followed by [`Architecture::output_layer`].
    pub fn mlp(input_dim: usize, hidden: &[usize], hidden_act: Activation, task: Task) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&u| LayerSpec::new(u, hidden_act))
            .collect();
        layers.push(Self::output_layer(task));
        Self {
            input_dim,
            layers,
            task,
        }
    }

    /// Softmax over the classes, or one linear unit for regression.
    pub fn output_layer(task: Task) -> LayerSpec {
        match task {
            Task::Classification { classes } => LayerSpec::new(classes, Activation::Softmax),
            Task::Regression => LayerSpec::new(1, Activation::Linear),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.layers.is_empty() {
            return Err(Error::arg(
                "architecture needs input_dim >= 1 and at least one layer",
            ));
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.units == 0 {
                return Err(Error::arg(format!("layer {l} has zero units")));
            }
            if !(0.0..1.0).contains(&layer.dropout_after) {
                return Err(Error::arg(format!("layer {l}: dropout must lie in [0, 1)")));
            }
            if l != last && layer.activation == Activation::Softmax {
                return Err(Error::arg("softmax is only allowed on the output layer"));
            }
        }
        let out = &self.layers[last];
        if out.dropout_after != 0.0 {
            return Err(Error::arg("dropout after the output layer is not allowed"));
        }
        match self.task {
            Task::Regression if out.units != 1 => Err(Error::arg("regression needs a single output unit")),
            Task::Classification { classes } if classes < 2 => Err(Error::arg("classification needs >= 2 classes")),
            // Binary tasks may also use one sigmoid unit with logistic loss.
            Task::Classification { classes: 2 } if out.units == 1 && out.activation == Activation::Sigmoid => Ok(()),
            Task::Classification { classes } if out.units != classes || out.activation != Activation::Softmax => {
                Err(Error::arg(format!(
                    "classification output must be {classes} softmax units (or one sigmoid unit for binary tasks)"
                )))
            }
            _ => Ok(()),
        }
    }

    /// `(fan_in, units)` per layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.input_dim;
        self.layers
            .iter()
            .map(|l| {
                let s = (fan_in, l.units);
                fan_in = l.units;
                s
            })
            .collect()
    }

    /// Default loss for the output layer.
    pub fn default_loss(&self) -> Loss {
        match self.layers.last().map(|l| l.activation) {
            Some(Activation::Softmax) => Loss::CategoricalXent,
            Some(Activation::Sigmoid) if matches!(self.task, Task::Classification { .. }) => {
                Loss::Logistic
            }
            _ => Loss::Squared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

pub fn param_count(arch: &Architecture) -> ParamCount {
    let mut count = ParamCount {
        total: 0,
        trainable: 0,
    };
    for ((fan_in, units), layer) in arch.shapes().into_iter().zip(&arch.layers) {
        let p = fan_in * units + units;
        count.total += p;
        if layer.trainable {
            count.trainable += p;
        }
    }
    count
}

/// Marks all but the last `last_trainable` layers as frozen.
pub fn rwt_freeze(arch: &Architecture, last_trainable: usize) -> Result<Architecture> {
    let n = arch.layers.len();
    if last_trainable == 0 || last_trainable > n {
        return Err(Error::arg(format!(
            "last_trainable must lie in 1..={n}, got {last_trainable}"
        )));
    }
    let mut out = arch.clone();
    for (l, layer) in out.layers.iter_mut().enumerate() {
        layer.trainable = l >= n - last_trainable;
    }
    Ok(out)
}

/// Location of one layer's block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub offset: usize,
    pub fan_in: usize,
    pub units: usize,
    pub trainable: bool,
}

impl LayerSlice {
    pub fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.units
    }

    pub fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.units;
        start..start + self.units
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.units + self.units
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    layout: Vec<LayerSlice>,
}

impl ParamVector {
    pub fn zeros(arch: &Architecture) -> Self {
        let mut offset = 0;
        let layout: Vec<LayerSlice> = arch
            .shapes()
            .into_iter()
            .zip(&arch.layers)
            .map(|((fan_in, units), l)| {
                let s = LayerSlice {
                    offset,
                    fan_in,
                    units,
                    trainable: l.trainable,
                };
                offset += fan_in * units + units;
                s
            })
            .collect();
        Self {
            theta: vec![0.0; offset],
            layout,
        }
    }

    pub fn layout(&self) -> &[LayerSlice] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Per-coordinate trainable flags.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for s in self.layout.iter().filter(|s| s.trainable) {
            m[s.range()].iter_mut().for_each(|v| *v = true);
        }
        m
    }

    pub fn trainable_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.layout
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.range())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamVector,
}

impl Model {
    /// All-zero parameters.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = ParamVector::zeros(&arch);
        Ok(Self { arch, params })
    }

    pub fn from_theta(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(arch)?;
        if theta.len() != m.params.len() {
            return Err(Error::DimensionMismatch {
                expected: m.params.len(),
                got: theta.len(),
            });
        }
        m.params.theta = theta;
        Ok(m)
    }

    /// Output probabilities (classification) or the one-element prediction (regression).
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: x.len(),
            });
        }
        Ok(net::forward(self, x))
    }

    /// Predicted class; one sigmoid unit predicts class 1 iff `p >= 0.5`.
    /// Ties in argmax go to the lowest index.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        let out = self.predict(x)?;
        Ok(if out.len() == 1 {
            usize::from(out[0] >= 0.5)
        } else {
            argmax(&out)
        })
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Uniform Glorot initialization of weights, zero biases.
pub fn init_model(arch: &Architecture, rng: &mut RngStream) -> Result<Model> {
    let mut model = Model::zeros(arch.clone())?;
    for s in model.params.layout.clone() {
        let limit = (6.0 / (s.fan_in + s.units) as f64).sqrt();
        for w in &mut model.params.theta[s.weights()] {
            *w = limit * (2.0 * rng.uniform() - 1.0);
        }
    }
    Ok(model)
}

/// On-disk model: architecture, flat parameters and training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub architecture: Architecture,
    pub theta: Vec<f64>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub seed: u64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn new(model: &Model, epsilon: Option<f64>, delta: Option<f64>, seed: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            architecture: model.arch.clone(),
            theta: model.params.theta.clone(),
            epsilon,
            delta,
            seed,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                c.version
            )));
        }
        Ok(c)
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_theta(self.architecture.clone(), self.theta.clone())
    }
}
