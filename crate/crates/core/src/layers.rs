//! Fully-connected layers shared by the energy model and the generator.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Linear => v,
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Softplus => tape.softplus(v),
        }
    }

    /// Whether the activation maps the whole real line into a bounded interval.
    pub fn is_bounded(self) -> bool {
        matches!(self, Activation::Tanh | Activation::Sigmoid)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "linear" => Activation::Linear,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "softplus" => Activation::Softplus,
            _ => return None,
        })
    }
}

/// Whether a forward pass should collect gradients for a model's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    /// Parameters enter the tape as constants; no gradient reaches them.
    Frozen,
}

pub fn bind(tape: &mut Tape, p: &Parameter, binding: Binding) -> Var {
    match binding {
        Binding::Trainable => tape.param(p),
        Binding::Frozen => tape.constant(p.value.clone()),
    }
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if bound > 0.0 {
        for v in t.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
    t
}

/// `x · W + b` with `W: [inputs, outputs]`. Layers feeding a batch norm
/// carry no bias since normalization removes it.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Dense {
    /// Weights uniform in `±1/sqrt(inputs)`, zero bias.
    pub fn fan_in(name: &str, inputs: usize, outputs: usize, with_bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self::from_weight(name, uniform_tensor(&[inputs, outputs], bound, rng), with_bias)
    }

    pub fn from_weight(name: &str, weight: Tensor, with_bias: bool) -> Self {
        let outputs = weight.cols();
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: with_bias
                .then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[outputs]))),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var> {
        let w = bind(tape, &self.weight, binding);
        let xw = tape.matmul(x, w)?;
        match &self.bias {
            Some(bias) => {
                let b = bind(tape, bias, binding);
                tape.add_row(xw, b)
            }
            None => Ok(xw),
        }
    }
}
