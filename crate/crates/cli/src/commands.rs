use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use deepebm::data_io::{load_checkpoint, save_checkpoint, write_points_csv, Checkpoint};
use deepebm::energy_model::EnergyModel;
use deepebm::evaluation::{energy_heatmap, export_heatmap, export_image_strip, latent_interpolation, HeatmapGrid};
use deepebm::generator::{sample_prior, GeneratorModel};
use deepebm::gradcheck::{default_gradcheck, GradCheckReport};
use deepebm::rng::{stream, Stream};
use deepebm::training::Trainer;
use deepebm::Tensor;

use crate::config::RunConfig;
use crate::report::{evaluate_2d, EvalOptions, EvalReport};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn periodic_checkpoint_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Failed(format!("{}: {e}", path.display()))
}

/// Loads a checkpoint together with the run configuration stored in it.
pub fn open_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig), CliError> {
    let ckpt = load_checkpoint(path).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    let cfg = RunConfig::from_json(&ckpt.config_text)
        .map_err(|e| CliError::Checkpoint(format!("{}: stored config unreadable: {e}", path.display())))?;
    Ok((ckpt, cfg))
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub final_checkpoint: PathBuf,
}

/// Trains to `cfg.steps` total steps, writing the resolved config, one JSON
/// metrics line per step, periodic checkpoints and a final checkpoint.
pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<TrainOutcome, CliError> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_json()).map_err(|e| io_error(&config_path, e))?;
    let (train, _) = cfg.datasets()?;

    let mut trainer = match &cfg.resume_from {
        Some(path) => {
            let (ckpt, _) = open_checkpoint(path)?;
            if ckpt.dem.arch() != &cfg.dem_arch() || ckpt.gen.arch() != &cfg.gen_arch() {
                return Err(CliError::Config(format!(
                    "{}: architecture differs from the run configuration",
                    path.display()
                )));
            }
            let stored = ckpt.train_config.clone();
            let wanted = cfg.train_config();
            let same = deepebm::training::TrainConfig { steps: 0, checkpoint_interval: 0, ..stored }
                == deepebm::training::TrainConfig { steps: 0, checkpoint_interval: 0, ..wanted.clone() };
            if !same {
                return Err(CliError::Config(format!(
                    "{}: training settings differ from the run configuration",
                    path.display()
                )));
            }
            let mut t = ckpt.into_trainer()?;
            t.config = wanted;
            t
        }
        None => {
            let mut init = stream(cfg.seed, Stream::Init);
            let dem = EnergyModel::new(cfg.dem_arch(), &mut init)?;
            let gen = GeneratorModel::new(cfg.gen_arch(), &mut init)?;
            Trainer::new(dem, gen, cfg.train_config())?
        }
    };

    let metrics_path = out.join(METRICS_FILE);
    let file = if cfg.resume_from.is_some() {
        OpenOptions::new().append(true).create(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| io_error(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let config_text = cfg.portable().to_json();
    let report_every = (cfg.steps / 10).max(1);

    while trainer.state.step < cfg.steps {
        let m = match trainer.step(&train) {
            Ok(m) => m,
            Err(e) => {
                metrics.flush().map_err(|e| io_error(&metrics_path, e))?;
                return Err(e.into());
            }
        };
        serde_json::to_writer(&mut metrics, &m).expect("metrics serialize");
        metrics.write_all(b"\n").map_err(|e| io_error(&metrics_path, e))?;
        if m.step % cfg.checkpoint_interval == 0 && m.step < cfg.steps {
            let path = out.join(periodic_checkpoint_name(m.step));
            save_checkpoint(&path, &Checkpoint::from_trainer(&trainer, config_text.clone()))?;
        }
        if m.step % report_every == 0 {
            let _ = writeln!(
                log,
                "step {:>7}  pos {:>10.4}  neg {:>10.4}  loss {:>9.5}",
                m.step, m.pos_energy, m.neg_energy, m.dem_loss
            );
        }
    }
    metrics.flush().map_err(|e| io_error(&metrics_path, e))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &Checkpoint::from_trainer(&trainer, config_text))?;
    Ok(TrainOutcome {
        trainer,
        final_checkpoint,
    })
}

fn is_pgm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// A `.pgm` path gets an image strip, anything else a CSV of points.
fn write_samples(x: &Tensor, out: &Path) -> Result<(), CliError> {
    if is_pgm(out) {
        export_image_strip(x, out)?;
    } else {
        write_points_csv(x, out)?;
    }
    Ok(())
}

pub fn sample(checkpoint: &Path, n: usize, seed: u64, out: &Path) -> Result<Tensor, CliError> {
    if n == 0 {
        return Err(CliError::Config("sample count must be positive".into()));
    }
    let (ckpt, _) = open_checkpoint(checkpoint)?;
    let z = sample_prior(n, ckpt.gen.latent_dim(), &mut stream(seed, Stream::Prior));
    let x = ckpt.gen.generate_infer(&z)?;
    write_samples(&x, out)?;
    Ok(x)
}

pub fn energy_map(
    checkpoint: &Path,
    bounds: [(f64, f64); 2],
    resolution: [usize; 2],
    out: &Path,
) -> Result<HeatmapGrid, CliError> {
    let (ckpt, _) = open_checkpoint(checkpoint)?;
    let grid = energy_heatmap(&ckpt.dem, bounds, resolution)?;
    export_heatmap(&grid, out)?;
    Ok(grid)
}

pub fn interpolate(checkpoint: &Path, k: usize, seed: u64, out: &Path) -> Result<Tensor, CliError> {
    let (ckpt, _) = open_checkpoint(checkpoint)?;
    let ends = sample_prior(2, ckpt.gen.latent_dim(), &mut stream(seed, Stream::Prior));
    let z = ends.tensor();
    let x = latent_interpolation(&ckpt.gen, z.row(0), z.row(1), k)?;
    write_samples(&x, out)?;
    Ok(x)
}

pub fn gradcheck(seed: u64, scale: f64) -> Result<GradCheckReport, CliError> {
    Ok(default_gradcheck(seed, scale)?)
}

pub fn eval(checkpoint: &Path, opts: &EvalOptions) -> Result<EvalReport, CliError> {
    let (ckpt, cfg) = open_checkpoint(checkpoint)?;
    if cfg.is_mnist() {
        return Err(CliError::Config("eval needs a 2-D dataset".into()));
    }
    let (train, held) = cfg.datasets()?;
    evaluate_2d(&ckpt.dem, &ckpt.gen, ckpt.state.step, &train, &held, opts)
}
