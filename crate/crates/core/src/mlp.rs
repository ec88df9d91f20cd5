//! Model description, flat parameter vectors and batches.
//!
//! Parameter layout: layers in input-to-output order; for each layer the
//! weight matrix (shape `fan_out x fan_in`, row-major) followed by the bias
//! vector (length `fan_out`). Eigenbases cached on disk are expressed in this
//! layout, so changing it requires bumping the cache format version.

use std::fmt;
use std::ops::{Deref, DerefMut};

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    ScalarRegression,
    KClassLogits { k: usize },
}

impl Head {
    pub fn output_dim(&self) -> usize {
        match *self {
            Head::ScalarRegression => 1,
            Head::KClassLogits { k } => k,
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self, Head::KClassLogits { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

/// Shape and offset of one affine layer inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset of the first weight entry; the bias follows the weights.
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }

    pub fn end(&self) -> usize {
        self.bias_offset() + self.fan_out
    }
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_widths: Vec<usize>, activation: Activation, head: Head) -> Self {
        MlpSpec {
            input_dim,
            hidden_widths,
            activation,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidSpec(format!("hidden layer {i} has zero width")));
        }
        if let Head::KClassLogits { k } = self.head {
            if k < 2 {
                return Err(Error::InvalidSpec(format!("classifier head needs k >= 2, got {k}")));
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.output_dim());
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                };
                offset = shape.end();
                shape
            })
            .collect()
    }

    /// Number of parameters, `sum over layers of (fan_in + 1) * fan_out`.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| (l.fan_in + 1) * l.fan_out).sum()
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<()> {
        let p = self.param_count();
        if params.len() != p {
            return Err(Error::dim("parameter vector", p, params.len()));
        }
        Ok(())
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input_dim)?;
        for w in &self.hidden_widths {
            write!(f, "-{w}")?;
        }
        let act = match self.activation {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        };
        match self.head {
            Head::ScalarRegression => write!(f, "-1 ({act}, regression)"),
            Head::KClassLogits { k } => write!(f, "-{k} ({act}, {k}-class)"),
        }
    }
}

/// A point in parameter space: model parameters, gradients, perturbations
/// and eigenvectors all share this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(p: usize) -> Self {
        ParamVector(vec![0.0; p])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| c * v).collect())
    }

    /// `self + c * other`
    pub fn axpy(&self, c: f64, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + c * b).collect())
    }

    pub(crate) fn weights(&self, layer: &LayerShape) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape(
            (layer.fan_out, layer.fan_in),
            &self.0[layer.offset..layer.bias_offset()],
        )
        .expect("layer shape consistent with spec")
    }

    pub(crate) fn bias(&self, layer: &LayerShape) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.0[layer.bias_offset()..layer.end()])
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weights uniform on `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(spec.param_count());
    for layer in spec.layers() {
        let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        for w in &mut params.0[layer.offset..layer.bias_offset()] {
            *w = rng.gen_range(-limit..=limit);
        }
    }
    Ok(params)
}

/// Inputs with their targets. Class targets are stored as exact integers.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Vec<f64>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::InvalidArgument("batch must contain at least one example".into()));
        }
        if inputs.nrows() != targets.len() {
            return Err(Error::dim("batch targets", inputs.nrows(), targets.len()));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows selected by index, in the given order.
    pub fn select(&self, rows: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select(ndarray::Axis(0), rows),
            targets: rows.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.dim() != other.dim() {
            return Err(Error::dim("batch feature count", self.dim(), other.dim()));
        }
        let inputs = ndarray::concatenate(ndarray::Axis(0), &[self.inputs.view(), other.inputs.view()])
            .expect("column counts checked");
        let mut targets = self.targets.clone();
        targets.extend_from_slice(&other.targets);
        Ok(Batch { inputs, targets })
    }

    /// Checks dimensions and that targets are valid for the head.
    pub fn check(&self, spec: &MlpSpec) -> Result<()> {
        if self.dim() != spec.input_dim {
            return Err(Error::dim("batch feature count", spec.input_dim, self.dim()));
        }
        if let Head::KClassLogits { k } = spec.head {
            for &t in &self.targets {
                if t.fract() != 0.0 || t < 0.0 || t >= k as f64 {
                    return Err(Error::HeadMismatch(format!(
                        "target {t} is not a class index in [0, {k})"
                    )));
                }
            }
        } else if let Some(t) = self.targets.iter().find(|t| !t.is_finite()) {
            return Err(Error::HeadMismatch(format!("non-finite regression target {t}")));
        }
        Ok(())
    }
}
