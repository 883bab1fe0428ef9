//! Alternating training of the energy model and the generator.
//!
//! Each step draws a data minibatch and a generator minibatch, takes one
//! AdaGrad step on the energy model's contrastive gradient, then (every
//! `dem_updates_per_dgm_update` steps) takes one AdaGrad step on the
//! generator with a fresh latent batch.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, BatchNormMode, Tape};
use crate::data_io::Dataset;
use crate::energy_model::{EnergyFunction, EnergyModel};
use crate::error::{Error, Result};
use crate::generator::{sample_prior, GeneratorModel};
use crate::layers::Binding;
use crate::optim::AdaGrad;
use crate::param::Parameter;
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dem_lr: f64,
    pub dgm_lr: f64,
    pub adagrad_eps: f64,
    pub entropy_weight: f64,
    pub steps: u64,
    pub dem_updates_per_dgm_update: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            dem_lr: 0.01,
            dgm_lr: 0.01,
            adagrad_eps: 1e-8,
            entropy_weight: 1.0,
            // about 50 passes over 10k points
            steps: 7_813,
            dem_updates_per_dgm_update: 1,
            seed: 0,
            checkpoint_interval: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        positive("dem_lr", self.dem_lr)?;
        positive("dgm_lr", self.dgm_lr)?;
        positive("adagrad_eps", self.adagrad_eps)?;
        if !(self.entropy_weight >= 0.0) || !self.entropy_weight.is_finite() {
            return Err(Error::Config(format!(
                "entropy_weight must be non-negative, got {}",
                self.entropy_weight
            )));
        }
        for (name, v) in [
            ("steps", self.steps),
            ("dem_updates_per_dgm_update", self.dem_updates_per_dgm_update),
            ("checkpoint_interval", self.checkpoint_interval),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Fixed-capacity record of the most recent energy-model losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    capacity: usize,
    values: VecDeque<f64>,
}

impl LossHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.values().sum::<f64>() / self.values.len() as f64)
    }
}

/// Everything beyond the model parameters needed to resume a run exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub dem_opt: AdaGrad,
    pub dgm_opt: AdaGrad,
    pub prior_rng: Rng,
    pub batch_rng: Rng,
    pub history: LossHistory,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            step: 0,
            dem_opt: AdaGrad::new(config.dem_lr, config.adagrad_eps),
            dgm_opt: AdaGrad::new(config.dgm_lr, config.adagrad_eps),
            prior_rng: stream(config.seed, Stream::Prior),
            batch_rng: stream(config.seed, Stream::Batch),
            history: LossHistory::new(256),
        }
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub pos_energy: f64,
    pub neg_energy: f64,
    pub dem_loss: f64,
    pub dem_grad_norm: f64,
    /// Present on steps that also updated the generator.
    pub gen_energy: Option<f64>,
    pub entropy: Option<f64>,
    pub dgm_grad_norm: Option<f64>,
}

fn grad_norm<'a>(params: impl IntoIterator<Item = &'a Parameter>) -> f64 {
    params
        .into_iter()
        .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

pub struct Trainer {
    pub dem: EnergyModel,
    pub gen: GeneratorModel,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(dem: EnergyModel, gen: GeneratorModel, config: TrainConfig) -> Result<Self> {
        let state = TrainState::new(&config);
        Self::resume(dem, gen, config, state)
    }

    pub fn resume(
        dem: EnergyModel,
        gen: GeneratorModel,
        config: TrainConfig,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        if dem.arch().input_dim != gen.output_dim() {
            return Err(Error::Config(format!(
                "energy model input width {} does not match generator output width {}",
                dem.arch().input_dim,
                gen.output_dim()
            )));
        }
        Ok(Self {
            dem,
            gen,
            config,
            state,
        })
    }

    /// One energy-model update and, on schedule, one generator update.
    pub fn step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Usage("training dataset is empty".into()));
        }
        if data.dim() != self.dem.arch().input_dim {
            return Err(Error::Dimension {
                op: "training data",
                lhs: data.points.shape().to_vec(),
                rhs: vec![self.dem.arch().input_dim],
            });
        }
        let n = self.config.batch_size;
        let step = self.state.step + 1;

        let idx: Vec<usize> = (0..n)
            .map(|_| self.state.batch_rng.random_range(0..data.len()))
            .collect();
        let x_pos = data.points.select_rows(&idx);
        let z = sample_prior(n, self.gen.latent_dim(), &mut self.state.prior_rng);
        let x_neg = self.gen.generate(&z, BatchNormMode::Train)?;

        let dem_loss = self.dem.loss_gradient(&x_pos, &x_neg)?;
        let dem_grad_norm = grad_norm(self.dem.parameters());
        self.state.dem_opt.step(self.dem.parameters_mut(), step)?;
        self.state.history.push(dem_loss.loss);

        let mut metrics = StepMetrics {
            step,
            pos_energy: dem_loss.pos_energy,
            neg_energy: dem_loss.neg_energy,
            dem_loss: dem_loss.loss,
            dem_grad_norm,
            gen_energy: None,
            entropy: None,
            dgm_grad_norm: None,
        };

        if step % self.config.dem_updates_per_dgm_update == 0 {
            let z = sample_prior(n, self.gen.latent_dim(), &mut self.state.prior_rng);
            let dgm = self
                .gen
                .loss_gradient(&self.dem, &z, self.config.entropy_weight)?;
            metrics.dgm_grad_norm = Some(grad_norm(self.gen.parameters()));
            self.state.dgm_opt.step(self.gen.parameters_mut(), step)?;
            // scales must stay usable by the entropy surrogate
            self.gen.entropy_surrogate()?;
            metrics.gen_energy = Some(dgm.energy);
            metrics.entropy = Some(dgm.entropy);
        }
        self.state.step = step;
        Ok(metrics)
    }

    /// `ceil(M / batch_size)` steps, i.e. one pass's worth of minibatches.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<Vec<StepMetrics>> {
        let steps = data.len().div_ceil(self.config.batch_size);
        (0..steps).map(|_| self.step(data)).collect()
    }
}

/// Gradients of the data-versus-model classifier built on an energy, with
/// `P(y=1|x) = σ(-E(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    /// `½(E⁺[σ(E(x⁺)) ∂E(x⁺)] - E⁻[σ(-E(x⁻)) ∂E(x⁻)])`, flattened over parameters.
    pub exact_grad: Vec<f64>,
    /// `¼(E⁺[∂E(x⁺)] - E⁻[∂E(x⁻)])`.
    pub approx_grad: Vec<f64>,
    pub cosine: f64,
    /// `‖exact‖ / ‖approx‖`.
    pub ratio: f64,
}

fn weighted_phase_gradient(
    energy: &impl EnergyFunction,
    x_pos: &Tensor,
    x_neg: &Tensor,
    weights: Option<(&Tensor, &Tensor)>,
    outer: f64,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let pos = tape.constant(x_pos.clone());
    let neg = tape.constant(x_neg.clone());
    let mut e_pos = energy.energy_on_tape(&mut tape, pos, Binding::Trainable)?;
    let mut e_neg = energy.energy_on_tape(&mut tape, neg, Binding::Trainable)?;
    if let Some((w_pos, w_neg)) = weights {
        let wp = tape.constant(w_pos.clone());
        let wn = tape.constant(w_neg.clone());
        e_pos = tape.mul(e_pos, wp)?;
        e_neg = tape.mul(e_neg, wn)?;
    }
    let m_pos = tape.mean(e_pos);
    let m_neg = tape.mean(e_neg);
    let diff = tape.sub(m_pos, m_neg)?;
    let root = tape.scale(diff, outer);
    let grads = tape.backward(root)?;
    Ok(energy
        .parameters()
        .into_iter()
        .flat_map(|p| match grads.param(p) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; p.value.numel()],
        })
        .collect())
}

/// Compares the exact classifier gradient to its equal-posterior approximation.
pub fn classifier_view_check(
    energy: &impl EnergyFunction,
    x_pos: &Tensor,
    x_neg: &Tensor,
) -> Result<ClassifierReport> {
    if x_pos.rows() != x_neg.rows() {
        return Err(Error::Usage(format!(
            "positive batch has {} rows, negative batch has {}",
            x_pos.rows(),
            x_neg.rows()
        )));
    }
    // P(y=0|x⁺) = σ(E(x⁺)), P(y=1|x⁻) = σ(-E(x⁻))
    let w_pos = energy.energy_values(x_pos)?.map(sigmoid);
    let w_neg = energy.energy_values(x_neg)?.map(|e| sigmoid(-e));
    let exact = weighted_phase_gradient(energy, x_pos, x_neg, Some((&w_pos, &w_neg)), 0.5)?;
    let approx = weighted_phase_gradient(energy, x_pos, x_neg, None, 0.25)?;
    let dot: f64 = exact.iter().zip(&approx).map(|(a, b)| a * b).sum();
    let ne = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
    let na = approx.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(ClassifierReport {
        cosine: dot / (ne * na),
        ratio: ne / na,
        exact_grad: exact,
        approx_grad: approx,
    })
}
