//! Quantitative summary of a trained 2-D model.

use deepebm::data_io::Dataset;
use deepebm::energy_model::{EnergyModel, EnergySurface};
use deepebm::evaluation::{mode_coverage, model_data_divergence, ModeCoverage, MODE_THRESHOLD};
use deepebm::generator::{sample_prior, GeneratorModel};
use deepebm::rng::{stream, Stream};
use deepebm::Tensor;
use rand::Rng as _;
use serde::Serialize;

use crate::CliError;

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub n_samples: usize,
    pub n_probes: usize,
    pub grid_n: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_samples: 5_000,
            n_probes: 5_000,
            grid_n: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub step: u64,
    pub coverage: ModeCoverage,
    /// Training-data extent padded by the mode threshold; used for the
    /// uniform probes and as the quadrature box.
    pub bounds: [(f64, f64); 2],
    pub held_out_energy: f64,
    pub probe_energy: f64,
    /// `probe_energy - held_out_energy`.
    pub energy_gap: f64,
    pub cross_entropy: f64,
    pub kl_vs_kde: f64,
    pub log_z: f64,
}

/// Axis-aligned extent of `points`, widened by `margin` on every side.
pub fn bounding_box(points: &Tensor, margin: f64) -> [(f64, f64); 2] {
    let mut b = [(f64::INFINITY, f64::NEG_INFINITY); 2];
    for i in 0..points.rows() {
        for (d, lim) in b.iter_mut().enumerate() {
            let v = points.get(i, d);
            lim.0 = lim.0.min(v);
            lim.1 = lim.1.max(v);
        }
    }
    b.map(|(lo, hi)| (lo - margin, hi + margin))
}

/// Mode coverage of infer-mode samples, held-out versus uniform-probe energy,
/// and quadrature likelihood metrics.
pub fn evaluate_2d(
    dem: &EnergyModel,
    gen: &GeneratorModel,
    step: u64,
    train: &Dataset,
    held_out: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport, CliError> {
    if dem.arch().input_dim != 2 {
        return Err(CliError::Config(format!(
            "evaluation needs 2-D data, model input is {}-dimensional",
            dem.arch().input_dim
        )));
    }
    let mut rng = stream(opts.seed, Stream::Eval);
    let z = sample_prior(opts.n_samples, gen.latent_dim(), &mut rng);
    let samples = gen.generate_infer(&z)?;
    let coverage = mode_coverage(&samples, &train.name)?;

    let bounds = bounding_box(&train.points, MODE_THRESHOLD);
    let mut probes = Vec::with_capacity(2 * opts.n_probes);
    for _ in 0..opts.n_probes {
        probes.push(rng.random_range(bounds[0].0..bounds[0].1));
        probes.push(rng.random_range(bounds[1].0..bounds[1].1));
    }
    let probe_energy = dem.energy_values(&Tensor::new(vec![opts.n_probes, 2], probes)?)?.mean();
    let held_out_energy = dem.energy_values(&held_out.points)?.mean();
    let div = model_data_divergence(dem, &held_out.points, bounds, opts.grid_n)?;
    Ok(EvalReport {
        step,
        coverage,
        bounds,
        held_out_energy,
        probe_energy,
        energy_gap: probe_energy - held_out_energy,
        cross_entropy: div.cross_entropy,
        kl_vs_kde: div.kl_vs_kde,
        log_z: div.log_z,
    })
}
