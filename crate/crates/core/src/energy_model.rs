//! The deep energy model.
//!
//! A feed-forward feature extractor `f(x)` with a bounded final activation
//! feeds a bank of softplus experts, alongside quadratic and linear terms on
//! the raw input:
//!
//! ```text
//! E(x) = (1/σ²) xᵀx - bᵀx - Σ_i softplus(W_iᵀ f(x) + b_i)
//! ```
//!
//! Because `f` is bounded each expert grows at most linearly in `‖x‖`, so the
//! quadratic term dominates and `e^{-E}` is integrable.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::experts::{gaussian_visible_free_energy, ExpertBank, ExpertKind};
use crate::layers::{bind, uniform_tensor, Activation, Binding, Dense};
use crate::param::Parameter;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Rows per tape when evaluating large point sets without gradients.
const EVAL_BLOCK: usize = 4096;

/// Anything that assigns an energy to each row of a batch.
pub trait EnergySurface {
    fn input_dim(&self) -> usize;

    /// Per-row energies of a `[batch, input_dim]` tensor.
    fn energy_values(&self, x: &Tensor) -> Result<Tensor>;
}

/// An energy that can be differentiated with respect to its own parameters.
pub trait EnergyFunction: EnergySurface {
    fn parameters(&self) -> Vec<&Parameter>;

    fn energy_on_tape(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var>;
}

fn blocked_energy(f: &impl EnergyFunction, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != f.input_dim() {
        return Err(Error::Dimension {
            op: "energy input",
            lhs: x.shape().to_vec(),
            rhs: vec![f.input_dim()],
        });
    }
    let mut out = Vec::with_capacity(x.rows());
    let indices: Vec<usize> = (0..x.rows()).collect();
    for block in indices.chunks(EVAL_BLOCK) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.select_rows(block));
        let e = f.energy_on_tape(&mut tape, xv, Binding::Frozen)?;
        out.extend_from_slice(tape.value(e).data());
    }
    Tensor::new(vec![x.rows()], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyArch {
    pub input_dim: usize,
    /// Widths of the feature layers; the last entry is the feature dimension.
    pub hidden: Vec<usize>,
    pub n_experts: usize,
    pub hidden_activation: Activation,
    pub feature_activation: Activation,
    pub sigma: f64,
}

impl EnergyArch {
    /// 2-128-128 features with 4 experts, as used on the 2-D datasets.
    pub fn toy_2d() -> Self {
        Self {
            input_dim: 2,
            hidden: vec![128, 128],
            n_experts: 4,
            hidden_activation: Activation::Softplus,
            feature_activation: Activation::Sigmoid,
            sigma: 1.0,
        }
    }

    /// Fully-connected MNIST model with 128 experts.
    pub fn mnist() -> Self {
        Self {
            input_dim: 784,
            hidden: vec![1024, 512],
            n_experts: 128,
            hidden_activation: Activation::Softplus,
            feature_activation: Activation::Sigmoid,
            sigma: 1.0,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.n_experts == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("energy model widths must be positive".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config("energy model needs at least one feature layer".into()));
        }
        if !self.feature_activation.is_bounded() {
            return Err(Error::Config(format!(
                "final feature activation must be bounded, got {}",
                self.feature_activation.name()
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EnergyModel {
    arch: EnergyArch,
    pub features: Vec<Dense>,
    pub experts: ExpertBank,
    pub b_vis: Parameter,
}

/// Scalar summary of one contrastive gradient evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DemLoss {
    pub loss: f64,
    pub pos_energy: f64,
    pub neg_energy: f64,
}

impl EnergyModel {
    /// Feature weights uniform with fan-in scaling, expert weights uniform in
    /// `±0.1`, zero biases.
    pub fn new(arch: EnergyArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut widths = vec![arch.input_dim];
        widths.extend(&arch.hidden);
        let features = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::fan_in(&format!("dem.features.{i}"), w[0], w[1], true, rng))
            .collect();
        let weight = uniform_tensor(&[arch.feature_dim(), arch.n_experts], 0.1, rng);
        let bank = ExpertBank::new(
            ExpertKind::RbmFreeEnergy,
            weight,
            Tensor::zeros(&[arch.n_experts]),
            None,
        )?;
        Ok(Self::assemble(arch, features, bank))
    }

    /// Every parameter zero; useful as a closed-form reference and as the
    /// skeleton a checkpoint is loaded into.
    pub fn zeros(arch: EnergyArch) -> Result<Self> {
        arch.validate()?;
        let mut widths = vec![arch.input_dim];
        widths.extend(&arch.hidden);
        let features = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Dense::from_weight(&format!("dem.features.{i}"), Tensor::zeros(&[w[0], w[1]]), true)
            })
            .collect();
        let bank = ExpertBank::new(
            ExpertKind::RbmFreeEnergy,
            Tensor::zeros(&[arch.feature_dim(), arch.n_experts]),
            Tensor::zeros(&[arch.n_experts]),
            None,
        )?;
        Ok(Self::assemble(arch, features, bank))
    }

    fn assemble(arch: EnergyArch, features: Vec<Dense>, mut experts: ExpertBank) -> Self {
        experts.weight.set_name("dem.experts.weight");
        experts.bias.set_name("dem.experts.bias");
        let b_vis = Parameter::new("dem.b_vis", Tensor::zeros(&[arch.input_dim]));
        Self {
            arch,
            features,
            experts,
            b_vis,
        }
    }

    pub fn arch(&self) -> &EnergyArch {
        &self.arch
    }

    pub fn sigma(&self) -> f64 {
        self.arch.sigma
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self
            .features
            .iter_mut()
            .flat_map(Dense::parameters_mut)
            .collect();
        out.push(&mut self.experts.weight);
        out.push(&mut self.experts.bias);
        out.push(&mut self.b_vis);
        out
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.arch.input_dim {
            return Err(Error::Dimension {
                op: "energy model input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.arch.input_dim],
            });
        }
        Ok(())
    }

    pub fn features_on_tape(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var> {
        let last = self.features.len() - 1;
        let mut h = x;
        for (i, layer) in self.features.iter().enumerate() {
            let a = layer.forward(tape, h, binding)?;
            let act = if i == last {
                self.arch.feature_activation
            } else {
                self.arch.hidden_activation
            };
            h = act.apply(tape, a);
        }
        Ok(h)
    }

    /// Deterministic feature vectors `f(x)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.features_on_tape(&mut tape, xv, Binding::Frozen)?;
        Ok(tape.value(f).clone())
    }

    pub fn energy(&self, x: &Tensor) -> Result<Tensor> {
        self.energy_values(x)
    }

    /// Gradient of `mean E(x_pos) - mean E(x_neg)` written into the model's
    /// parameters. `x_neg` enters as a constant, so nothing upstream of it
    /// (such as a generator) receives gradient.
    pub fn loss_gradient(&mut self, x_pos: &Tensor, x_neg: &Tensor) -> Result<DemLoss> {
        if x_pos.rows() != x_neg.rows() {
            return Err(Error::Usage(format!(
                "positive batch has {} rows, negative batch has {}",
                x_pos.rows(),
                x_neg.rows()
            )));
        }
        self.check_width(x_pos)?;
        self.check_width(x_neg)?;
        let mut tape = Tape::new();
        let pos = tape.constant(x_pos.clone());
        let neg = tape.constant(x_neg.clone());
        let e_pos = self.energy_on_tape(&mut tape, pos, Binding::Trainable)?;
        let e_neg = self.energy_on_tape(&mut tape, neg, Binding::Trainable)?;
        let m_pos = tape.mean(e_pos);
        let m_neg = tape.mean(e_neg);
        let loss = tape.sub(m_pos, m_neg)?;
        let grads = tape.backward(loss)?;
        grads.write_into(self.parameters_mut());
        Ok(DemLoss {
            loss: tape.value(loss).item(),
            pos_energy: tape.value(m_pos).item(),
            neg_energy: tape.value(m_neg).item(),
        })
    }
}

impl EnergySurface for EnergyModel {
    fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    fn energy_values(&self, x: &Tensor) -> Result<Tensor> {
        blocked_energy(self, x)
    }
}

impl EnergyFunction for EnergyModel {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.features.iter().flat_map(Dense::parameters).collect();
        out.push(&self.experts.weight);
        out.push(&self.experts.bias);
        out.push(&self.b_vis);
        out
    }

    fn energy_on_tape(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var> {
        self.check_width(tape.value(x))?;
        let f = self.features_on_tape(tape, x, binding)?;
        gaussian_visible_free_energy(tape, x, f, &self.experts, self.arch.sigma, &self.b_vis, binding)
    }
}

/// `E(x) = wᵀx`: the smallest differentiable energy, handy as a reference.
#[derive(Clone, Debug)]
pub struct LinearEnergy {
    pub weight: Parameter,
}

impl LinearEnergy {
    pub fn new(weight: Tensor) -> Self {
        Self {
            weight: Parameter::new("linear.weight", weight),
        }
    }
}

impl EnergySurface for LinearEnergy {
    fn input_dim(&self) -> usize {
        self.weight.value.numel()
    }

    fn energy_values(&self, x: &Tensor) -> Result<Tensor> {
        blocked_energy(self, x)
    }
}

impl EnergyFunction for LinearEnergy {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight]
    }

    fn energy_on_tape(&self, tape: &mut Tape, x: Var, binding: Binding) -> Result<Var> {
        let w = bind(tape, &self.weight, binding);
        tape.matvec(x, w)
    }
}

/// Tensor-product trapezoidal rule over a box in one or two dimensions.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    /// `[grid_n^d, d]` node coordinates, last dimension fastest.
    pub points: Tensor,
    pub log_weights: Vec<f64>,
}

impl QuadratureGrid {
    pub fn new(bounds: &[(f64, f64)], grid_n: usize) -> Result<Self> {
        let d = bounds.len();
        if d == 0 || d > 2 {
            return Err(Error::Unsupported(format!(
                "quadrature is limited to 1 or 2 dimensions, got {d}"
            )));
        }
        if grid_n < 2 {
            return Err(Error::Usage(format!("grid needs at least 2 nodes, got {grid_n}")));
        }
        if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(hi > lo)) {
            return Err(Error::Usage(format!("empty quadrature interval [{lo}, {hi}]")));
        }
        let axes: Vec<(Vec<f64>, Vec<f64>)> = bounds
            .iter()
            .map(|&(lo, hi)| {
                let h = (hi - lo) / (grid_n - 1) as f64;
                let nodes = (0..grid_n).map(|i| lo + h * i as f64).collect();
                let weights = (0..grid_n)
                    .map(|i| if i == 0 || i == grid_n - 1 { 0.5 * h } else { h })
                    .collect();
                (nodes, weights)
            })
            .collect();
        let total = grid_n.pow(d as u32);
        let mut points = Vec::with_capacity(total * d);
        let mut log_weights = Vec::with_capacity(total);
        for flat in 0..total {
            let mut w = 1.0;
            let mut rem = flat;
            let mut coords = vec![0.0; d];
            for axis in (0..d).rev() {
                let i = rem % grid_n;
                rem /= grid_n;
                coords[axis] = axes[axis].0[i];
                w *= axes[axis].1[i];
            }
            points.extend(coords);
            log_weights.push(w.ln());
        }
        Ok(Self {
            points: Tensor::new(vec![total, d], points)?,
            log_weights,
        })
    }

    /// `log Σ_k w_k e^{-E_k}` for energies at the grid nodes.
    pub fn log_integral(&self, energies: &[f64]) -> f64 {
        log_sum_exp(self.log_weights.iter().zip(energies).map(|(lw, e)| lw - e))
    }
}

pub(crate) fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Brute-force `log Z = log ∫ e^{-E(x)} dx` over `bounds` by trapezoidal
/// quadrature. Only one- and two-dimensional inputs are supported.
pub fn log_partition_oracle(
    surface: &(impl EnergySurface + ?Sized),
    bounds: &[(f64, f64)],
    grid_n: usize,
) -> Result<f64> {
    if surface.input_dim() > 2 {
        return Err(Error::Unsupported(format!(
            "partition oracle needs input dimension <= 2, got {}",
            surface.input_dim()
        )));
    }
    if bounds.len() != surface.input_dim() {
        return Err(Error::Usage(format!(
            "{} bounds given for a {}-dimensional energy",
            bounds.len(),
            surface.input_dim()
        )));
    }
    let grid = QuadratureGrid::new(bounds, grid_n)?;
    let e = surface.energy_values(&grid.points)?;
    Ok(grid.log_integral(e.data()))
}
