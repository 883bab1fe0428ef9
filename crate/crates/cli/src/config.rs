//! Run configuration: a flat JSON object, with `--key value` overrides.

use std::path::{Path, PathBuf};

use deepebm::data_io::{gen_four_spin, gen_two_spiral, load_mnist_idx, Dataset, FOUR_SPIN, TWO_SPIRAL};
use deepebm::energy_model::EnergyArch;
use deepebm::generator::GeneratorArch;
use deepebm::rng::{stream, Stream};
use deepebm::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

pub const MNIST: &str = "mnist";
/// Overrides `output_dir` from the config file; an explicit `--output_dir` still wins.
pub const OUTPUT_DIR_ENV: &str = "DEEPEBM_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `four_spin`, `two_spiral` or `mnist`.
    pub dataset: String,
    pub n_points: usize,
    pub n_held_out: usize,
    pub noise_sd: f64,
    /// Directory holding the standard MNIST training IDX files.
    pub mnist_dir: Option<PathBuf>,

    /// Architecture widths; `None` picks the dataset's preset.
    pub dem_hidden: Option<Vec<usize>>,
    pub n_experts: Option<usize>,
    pub sigma: f64,
    pub latent_dim: Option<usize>,
    pub gen_hidden: Option<Vec<usize>>,

    pub batch_size: usize,
    pub dem_lr: f64,
    pub dgm_lr: f64,
    pub adagrad_eps: f64,
    pub entropy_weight: f64,
    pub steps: u64,
    pub dem_updates_per_dgm_update: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,

    pub output_dir: PathBuf,
    /// Continue from this checkpoint up to `steps` total steps.
    pub resume_from: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset: FOUR_SPIN.into(),
            n_points: 10_000,
            n_held_out: 2_000,
            noise_sd: 0.02,
            mnist_dir: None,
            dem_hidden: None,
            n_experts: None,
            sigma: 1.0,
            latent_dim: None,
            gen_hidden: None,
            batch_size: t.batch_size,
            dem_lr: t.dem_lr,
            dgm_lr: t.dgm_lr,
            adagrad_eps: t.adagrad_eps,
            entropy_weight: t.entropy_weight,
            steps: t.steps,
            dem_updates_per_dgm_update: t.dem_updates_per_dgm_update,
            seed: t.seed,
            checkpoint_interval: t.checkpoint_interval,
            output_dir: PathBuf::from("runs/default"),
            resume_from: None,
        }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Splits `--key value` / `--key=value` pairs. Dashes in keys become underscores.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(key) = arg.strip_prefix("--") else {
            return Err(config_error(format!("expected `--key value`, got `{arg}`")));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| config_error(format!("missing value for `--{key}`")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// A bare word that is not valid JSON is taken as a string.
fn override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses the config file (if any), then the output-directory variable,
    /// then the overrides, and validates the result.
    pub fn load(
        path: Option<&Path>,
        overrides: &[(String, String)],
        env_output_dir: Option<String>,
    ) -> Result<Self, CliError> {
        let mut map: Map<String, Value> = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_error(format!("{}: {e}", p.display())))?;
                let parsed: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| config_error(format!("{}: {e}", p.display())))?;
                to_map(&parsed)
            }
            None => to_map(&RunConfig::default()),
        };
        if let Some(dir) = env_output_dir {
            map.insert("output_dir".into(), Value::String(dir));
        }
        for (key, raw) in overrides {
            if !map.contains_key(key) {
                return Err(config_error(format!("unknown key `{key}`")));
            }
            map.insert(key.clone(), override_value(raw));
        }
        let cfg: RunConfig = serde_json::from_value(Value::Object(map))
            .map_err(|e| config_error(format!("override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self.dataset.as_str() {
            FOUR_SPIN | TWO_SPIRAL => {}
            MNIST => {
                if self.mnist_dir.is_none() {
                    return Err(config_error("dataset `mnist` needs `mnist_dir`"));
                }
            }
            other => return Err(config_error(format!("unknown dataset `{other}`"))),
        }
        if self.n_points < 4 {
            return Err(config_error("n_points must be at least 4"));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(config_error("noise_sd must be non-negative"));
        }
        self.train_config().validate()?;
        self.dem_arch().validate()?;
        self.gen_arch().validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| config_error(e.to_string()))
    }

    /// The configuration with its filesystem locations cleared, as stored in
    /// checkpoints; identical runs in different directories yield identical files.
    pub fn portable(&self) -> RunConfig {
        RunConfig {
            output_dir: PathBuf::new(),
            resume_from: None,
            ..self.clone()
        }
    }

    pub fn is_mnist(&self) -> bool {
        self.dataset == MNIST
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            dem_lr: self.dem_lr,
            dgm_lr: self.dgm_lr,
            adagrad_eps: self.adagrad_eps,
            entropy_weight: self.entropy_weight,
            steps: self.steps,
            dem_updates_per_dgm_update: self.dem_updates_per_dgm_update,
            seed: self.seed,
            checkpoint_interval: self.checkpoint_interval,
        }
    }

    pub fn dem_arch(&self) -> EnergyArch {
        let preset = if self.is_mnist() { EnergyArch::mnist() } else { EnergyArch::toy_2d() };
        EnergyArch {
            hidden: self.dem_hidden.clone().unwrap_or(preset.hidden),
            n_experts: self.n_experts.unwrap_or(preset.n_experts),
            sigma: self.sigma,
            ..preset
        }
    }

    pub fn gen_arch(&self) -> GeneratorArch {
        let preset = if self.is_mnist() { GeneratorArch::mnist() } else { GeneratorArch::toy_2d() };
        GeneratorArch {
            latent_dim: self.latent_dim.unwrap_or(preset.latent_dim),
            hidden: self.gen_hidden.clone().unwrap_or(preset.hidden),
            ..preset
        }
    }

    /// Training set and held-out set. Synthetic sets come from one data stream,
    /// training points first; MNIST holds out the images after the training subset.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        if self.is_mnist() {
            let dir = self.mnist_dir.as_ref().expect("validated");
            let all = load_mnist_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
            let total = all.len();
            if total <= self.n_points {
                return Err(config_error(format!(
                    "n_points {} leaves no held-out images out of {total}",
                    self.n_points
                )));
            }
            let held_idx: Vec<usize> = (self.n_points..total.min(self.n_points + self.n_held_out)).collect();
            let held = Dataset {
                points: all.points.select_rows(&held_idx),
                labels: all.labels.as_ref().map(|l| held_idx.iter().map(|&i| l[i]).collect()),
                ..all.clone()
            };
            return Ok((all.truncate(self.n_points), held));
        }
        let gen = if self.dataset == FOUR_SPIN { gen_four_spin } else { gen_two_spiral };
        let mut rng = stream(self.seed, Stream::Data);
        let train = gen(self.n_points, self.noise_sd, &mut rng)?;
        let held = gen(self.n_held_out.max(4), self.noise_sd, &mut rng)?;
        Ok((train, held))
    }
}

fn to_map(cfg: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("config is a struct"),
    }
}
