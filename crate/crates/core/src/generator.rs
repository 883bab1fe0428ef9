//! The deep generative model.
//!
//! Samples are drawn ancestrally: `z ~ U(-1, 1)^{d_z}`, then `x = G(z)` with a
//! deterministic network. Every hidden layer is `Dense -> BatchNorm -> act`;
//! the output layer has no normalization.
//!
//! The generator is trained to lower `E(G(z))` under a frozen energy model
//! while keeping its batch-norm scales large. The scales enter through the
//! entropy surrogate `Σ_a ½ log(2eπ σ_a²)`, one term per normalized unit,
//! whose gradient with respect to `σ_a` is `1/σ_a`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, RunningStats, Tape, Var};
use crate::energy_model::EnergyFunction;
use crate::error::{Error, Result};
use crate::layers::{bind, Activation, Binding, Dense};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `½ log(2eπ)`, the entropy of a unit-variance normal.
pub const HALF_LOG_2_E_PI: f64 = 1.418_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl GeneratorArch {
    /// 4-128-128-2 with a linear output.
    pub fn toy_2d() -> Self {
        Self {
            latent_dim: 4,
            hidden: vec![128, 128],
            output_dim: 2,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Linear,
        }
    }

    /// 10-dimensional latent, sigmoid pixels.
    pub fn mnist() -> Self {
        Self {
            latent_dim: 10,
            hidden: vec![512, 1024],
            output_dim: 784,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        Ok(())
    }
}

/// Batch-norm parameters and running statistics for one hidden layer.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub shift: Parameter,
    pub scale: Parameter,
    pub running: RunningStats,
}

impl BatchNorm {
    fn new(name: &str, width: usize) -> Self {
        Self {
            shift: Parameter::new(format!("{name}.bn.shift"), Tensor::zeros(&[width])),
            scale: Parameter::new(format!("{name}.bn.scale"), Tensor::ones(&[width])),
            running: RunningStats::new(width),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorLayer {
    pub dense: Dense,
    pub norm: Option<BatchNorm>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    arch: GeneratorArch,
    pub layers: Vec<GeneratorLayer>,
}

/// Latent codes, every entry in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    z: Tensor,
}

impl LatentBatch {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "latent batch",
                lhs: z.shape().to_vec(),
                rhs: vec![],
            });
        }
        if let Some(v) = z.data().iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(Error::Invariant(format!("latent value {v} outside [-1, 1]")));
        }
        Ok(Self { z })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.z
    }

    pub fn rows(&self) -> usize {
        self.z.rows()
    }
}

/// `n` i.i.d. draws from `U(-1, 1)^{d_z}`.
pub fn sample_prior(n: usize, latent_dim: usize, rng: &mut Rng) -> LatentBatch {
    assert!(n >= 1 && latent_dim >= 1, "prior sample needs n >= 1 and d_z >= 1");
    let data = (0..n * latent_dim)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    LatentBatch {
        z: Tensor::new(vec![n, latent_dim], data).expect("shape matches"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DgmLoss {
    pub loss: f64,
    pub energy: f64,
    pub entropy: f64,
}

impl GeneratorModel {
    /// Fan-in uniform weights, unit batch-norm scales, zero shifts.
    pub fn new(arch: GeneratorArch, rng: &mut Rng) -> Result<Self> {
        Self::build(arch, |name, i, o, bias| Dense::fan_in(name, i, o, bias, rng))
    }

    /// Zero weights with unit scales; the skeleton a checkpoint is loaded into.
    pub fn zeros(arch: GeneratorArch) -> Result<Self> {
        Self::build(arch, |name, i, o, bias| {
            Dense::from_weight(name, Tensor::zeros(&[i, o]), bias)
        })
    }

    fn build(
        arch: GeneratorArch,
        mut dense: impl FnMut(&str, usize, usize, bool) -> Dense,
    ) -> Result<Self> {
        arch.validate()?;
        let mut widths = vec![arch.latent_dim];
        widths.extend(&arch.hidden);
        widths.push(arch.output_dim);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let name = format!("gen.layers.{i}");
                let is_output = i == last;
                GeneratorLayer {
                    dense: dense(&name, w[0], w[1], is_output),
                    norm: (!is_output).then(|| BatchNorm::new(&name, w[1])),
                    activation: if is_output {
                        arch.output_activation
                    } else {
                        arch.hidden_activation
                    },
                }
            })
            .collect();
        Ok(Self { arch, layers })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn output_dim(&self) -> usize {
        self.arch.output_dim
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.dense.parameters());
            if let Some(bn) = &layer.norm {
                out.push(&bn.shift);
                out.push(&bn.scale);
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.extend(layer.dense.parameters_mut());
            if let Some(bn) = &mut layer.norm {
                out.push(&mut bn.shift);
                out.push(&mut bn.scale);
            }
        }
        out
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.layers.iter().filter_map(|l| l.norm.as_ref())
    }

    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape,
        z: Var,
        mode: BatchNormMode,
        binding: Binding,
    ) -> Result<Var> {
        let zv = tape.value(z);
        if zv.shape().len() != 2 || zv.cols() != self.arch.latent_dim {
            return Err(Error::Dimension {
                op: "generator input",
                lhs: zv.shape().to_vec(),
                rhs: vec![self.arch.latent_dim],
            });
        }
        let mut h = z;
        for layer in &mut self.layers {
            let mut a = layer.dense.forward(tape, h, binding)?;
            if let Some(bn) = &mut layer.norm {
                let shift = bind(tape, &bn.shift, binding);
                let scale = bind(tape, &bn.scale, binding);
                a = tape.batch_norm(a, shift, scale, mode, &mut bn.running)?;
            }
            h = layer.activation.apply(tape, a);
        }
        Ok(h)
    }

    /// Maps latent codes to samples. Train mode normalizes with batch
    /// statistics and updates the running averages; infer mode is a pure
    /// row-wise function of `z`.
    pub fn generate(&mut self, z: &LatentBatch, mode: BatchNormMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.tensor().clone());
        let x = self.forward_on_tape(&mut tape, zv, mode, Binding::Frozen)?;
        Ok(tape.value(x).clone())
    }

    /// Infer-mode sampling that leaves the model untouched.
    pub fn generate_infer(&self, z: &LatentBatch) -> Result<Tensor> {
        self.clone().generate(z, BatchNormMode::Infer)
    }

    fn check_scales(&self) -> Result<()> {
        for bn in self.batch_norms() {
            if let Some(i) = bn.scale.value.data().iter().position(|&s| s == 0.0) {
                return Err(Error::Singularity(format!(
                    "batch-norm scale {}[{i}] is zero",
                    bn.scale.name()
                )));
            }
        }
        Ok(())
    }

    pub fn entropy_on_tape(&self, tape: &mut Tape, binding: Binding) -> Result<Option<Var>> {
        self.check_scales()?;
        let mut total: Option<Var> = None;
        for bn in self.batch_norms() {
            let s = bind(tape, &bn.scale, binding);
            let sq = tape.square(s);
            let var = tape.scale(sq, 2.0 * std::f64::consts::E * std::f64::consts::PI);
            let lg = tape.log(var);
            let half = tape.scale(lg, 0.5);
            let term = tape.sum(half);
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
        Ok(total)
    }

    /// `Σ_a ½ log(2eπ σ_a²)` over every batch-norm scale.
    pub fn entropy_surrogate(&self) -> Result<f64> {
        let mut tape = Tape::new();
        Ok(self
            .entropy_on_tape(&mut tape, Binding::Frozen)?
            .map_or(0.0, |v| tape.value(v).item()))
    }

    /// Gradient of `mean E(G(z)) - entropy_weight * entropy_surrogate` written
    /// into the generator's parameters. The energy model is frozen.
    pub fn loss_gradient(
        &mut self,
        dem: &(impl EnergyFunction + ?Sized),
        z: &LatentBatch,
        entropy_weight: f64,
    ) -> Result<DgmLoss> {
        if !(entropy_weight >= 0.0) {
            return Err(Error::Usage(format!(
                "entropy weight must be non-negative, got {entropy_weight}"
            )));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.tensor().clone());
        let x = self.forward_on_tape(&mut tape, zv, BatchNormMode::Train, Binding::Trainable)?;
        let e = dem.energy_on_tape(&mut tape, x, Binding::Frozen)?;
        let energy = tape.mean(e);
        let (loss, entropy) = match self.entropy_on_tape(&mut tape, Binding::Trainable)? {
            Some(h) => {
                let weighted = tape.scale(h, entropy_weight);
                (tape.sub(energy, weighted)?, tape.value(h).item())
            }
            None => (energy, 0.0),
        };
        let grads = tape.backward(loss)?;
        grads.write_into(self.parameters_mut());
        Ok(DgmLoss {
            loss: tape.value(loss).item(),
            energy: tape.value(energy).item(),
            entropy,
        })
    }
}
