use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deepebm::gradcheck::DEFAULT_TOLERANCE;
use deepebm_cli::commands;
use deepebm_cli::config::{parse_overrides, OUTPUT_DIR_ENV};
use deepebm_cli::report::EvalOptions;
use deepebm_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "deepebm", version, about = "Train and inspect deep energy models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; any `--key value` pair overrides a config key.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Draw infer-mode generator samples (CSV, or a PGM strip for image data).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Energy of a 2-D model on a grid, as CSV with a scale sidecar.
    EnergyMap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `xmin,xmax,ymin,ymax`
        #[arg(long, default_value = "-1,1,-1,1", allow_hyphen_values = true)]
        bounds: String,
        /// `n` or `nx,ny`
        #[arg(long, default_value = "100")]
        resolution: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Samples along a straight line between two random latent codes.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every gradient of a small random model pair.
    Gradcheck {
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mode coverage, energy gap and quadrature likelihood of a 2-D checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        grid_n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| CliError::Config(format!("bad {what} `{s}`"))))
        .collect()
}

fn parse_bounds(s: &str) -> Result<[(f64, f64); 2], CliError> {
    match parse_list::<f64>("bounds", s)?[..] {
        [x0, x1, y0, y1] => Ok([(x0, x1), (y0, y1)]),
        _ => Err(CliError::Config(format!("bounds need four values, got `{s}`"))),
    }
}

fn parse_resolution(s: &str) -> Result<[usize; 2], CliError> {
    match parse_list::<usize>("resolution", s)?[..] {
        [n] => Ok([n, n]),
        [nx, ny] => Ok([nx, ny]),
        _ => Err(CliError::Config(format!("resolution needs one or two values, got `{s}`"))),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, overrides } => {
            let (paths, overrides): (Vec<_>, Vec<_>) =
                parse_overrides(&overrides)?.into_iter().partition(|(k, _)| k == "config");
            // `--config` may also appear after the first override
            let config = paths.into_iter().last().map(|(_, v)| PathBuf::from(v)).or(config);
            let cfg = RunConfig::load(config.as_deref(), &overrides, std::env::var(OUTPUT_DIR_ENV).ok())?;
            let outcome = commands::train(&cfg, &mut std::io::stderr())?;
            println!("{}", outcome.final_checkpoint.display());
        }
        Command::Sample { checkpoint, n, seed, out } => {
            let x = commands::sample(&checkpoint, n, seed, &out)?;
            println!("wrote {} samples to {}", x.rows(), out.display());
        }
        Command::EnergyMap { checkpoint, bounds, resolution, out } => {
            let grid = commands::energy_map(&checkpoint, parse_bounds(&bounds)?, parse_resolution(&resolution)?, &out)?;
            let (ix, iy) = grid.argmin();
            let [x, y] = grid.cell_center(ix, iy);
            println!("min {} at ({x}, {y}), max {}", grid.min(), grid.max());
        }
        Command::Interpolate { checkpoint, k, seed, out } => {
            let x = commands::interpolate(&checkpoint, k, seed, &out)?;
            println!("wrote {} frames to {}", x.rows(), out.display());
        }
        Command::Gradcheck { scale, seed } => {
            let report = commands::gradcheck(seed, scale)?;
            for p in &report.params {
                println!("{:<4} {:<28} {:>5} entries  max rel error {:.3e}", p.model, p.name, p.entries, p.max_rel_error);
            }
            let worst = report.worst_rel_error();
            println!("worst relative error {worst:.3e} over {} entries", report.entries());
            if !report.passes(DEFAULT_TOLERANCE) {
                return Err(CliError::Failed(format!("gradient check failed: {worst:.3e} >= {DEFAULT_TOLERANCE:e}")));
            }
        }
        Command::Eval { checkpoint, n, seed, grid_n, out } => {
            let opts = EvalOptions { n_samples: n, n_probes: n, grid_n, seed };
            let report = commands::eval(&checkpoint, &opts)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
