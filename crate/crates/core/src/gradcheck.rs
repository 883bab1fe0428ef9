//! Central-difference checks of analytic parameter gradients.

use rand::Rng as _;
use serde::Serialize;

use crate::data_io::gen_four_spin;
use crate::energy_model::{EnergyArch, EnergyModel};
use crate::error::Result;
use crate::generator::{sample_prior, GeneratorArch, GeneratorModel};
use crate::layers::Activation;
use crate::param::Parameter;
use crate::rng::{stream, Stream};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const DEFAULT_FLOOR: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub model: String,
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn worst_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.max_rel_error)
    }

    pub fn entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst_rel_error() < tolerance
    }
}

/// Perturbs every entry of every parameter of `model` and compares central
/// differences of `loss` with the gradient it writes into the parameters.
///
/// `loss` must return the scalar objective and leave its gradient in each
/// parameter's `grad`; `params` lists the parameters to check.
pub fn check_gradients<M>(
    label: &str,
    model: &mut M,
    mut params: impl FnMut(&mut M) -> Vec<&mut Parameter>,
    mut loss: impl FnMut(&mut M) -> Result<f64>,
    step: f64,
    floor: f64,
) -> Result<Vec<ParamCheck>> {
    loss(model)?;
    let analytic: Vec<(String, Vec<f64>)> = params(model)
        .into_iter()
        .map(|p| (p.name().to_string(), p.grad.data().to_vec()))
        .collect();
    let mut out = Vec::with_capacity(analytic.len());
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            model: label.to_string(),
            name: name.clone(),
            entries: grad.len(),
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for (j, &a) in grad.iter().enumerate() {
            let orig = params(model)[pi].value.data()[j];
            params(model)[pi].value.data_mut()[j] = orig + step;
            let plus = loss(model)?;
            params(model)[pi].value.data_mut()[j] = orig - step;
            let minus = loss(model)?;
            params(model)[pi].value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric, floor);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = j;
            }
        }
        out.push(check);
    }
    Ok(out)
}

/// Checks every parameter of a 2-16-4-expert energy model and a 4-16-2
/// batch-normalized generator on a random four-spin batch.
///
/// Every parameter is moved off its initial value (`value * scale` plus
/// uniform noise, batch-norm scales drawn from `[0.5, 1.5]`) so no gradient
/// is trivially zero. Smooth activations keep the losses differentiable
/// everywhere.
pub fn default_gradcheck(seed: u64, scale: f64) -> Result<GradCheckReport> {
    let mut init = stream(seed, Stream::Init);
    let mut dem = EnergyModel::new(
        EnergyArch {
            input_dim: 2,
            hidden: vec![16],
            n_experts: 4,
            hidden_activation: Activation::Softplus,
            feature_activation: Activation::Sigmoid,
            sigma: 1.0,
        },
        &mut init,
    )?;
    let mut gen = GeneratorModel::new(
        GeneratorArch {
            latent_dim: 4,
            hidden: vec![16],
            output_dim: 2,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Linear,
        },
        &mut init,
    )?;
    for p in dem.parameters_mut().into_iter().chain(gen.parameters_mut()) {
        let is_bn_scale = p.name().ends_with(".bn.scale");
        for v in p.value.data_mut() {
            *v = if is_bn_scale {
                init.random_range(0.5..1.5)
            } else {
                *v * scale + init.random_range(-0.2..0.2)
            };
        }
    }

    let batch = 8;
    let x_pos = gen_four_spin(batch, 0.02, &mut stream(seed, Stream::Data))?.points;
    let mut prior = stream(seed, Stream::Prior);
    let x_neg = gen.generate(&sample_prior(batch, 4, &mut prior), crate::autodiff::BatchNormMode::Train)?;
    let z = sample_prior(batch, 4, &mut prior);

    let mut params = check_gradients(
        "dem",
        &mut dem,
        |m| m.parameters_mut(),
        |m| Ok(m.loss_gradient(&x_pos, &x_neg)?.loss),
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )?;
    params.extend(check_gradients(
        "dgm",
        &mut gen,
        |g| g.parameters_mut(),
        |g| Ok(g.loss_gradient(&dem, &z, 1.0)?.loss),
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )?);
    Ok(GradCheckReport { params })
}
