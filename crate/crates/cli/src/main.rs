//! `quasispec`: calibration, reconstruction and analysis from the command line.

mod commands;
mod config;
mod errors;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::PipelineConfig;
use errors::{exit_code, invalid, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK};
use manifest::{Manifest, RunLog, Status};

#[derive(Debug, Parser)]
#[command(name = "quasispec", version, about = "Quasi-transparency spectra from bright-field colour images")]
struct Cli {
    /// JSON pipeline config, or a run manifest whose config is reused.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Print the resolved config, defaults included, and exit.
    #[arg(long)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name")]
pub enum Command {
    /// Build the per-pixel calibration table from the configured level stacks.
    Calibrate,
    /// Correct raw frames, mask bright pixels and keep the sharpest frame.
    Correct {
        /// Calibration table; built from the config when omitted.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Raw frame (repeat for a z-stack); defaults to `input.frames`.
        #[arg(long = "frame")]
        frames: Vec<PathBuf>,
    },
    /// Reconstruct a spectral cube from a corrected image.
    Reconstruct {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        it_max: Option<usize>,
    },
    /// Render a cube to sRGB under a black body or tabulated illuminant.
    Render {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        illuminant: Option<PathBuf>,
    },
    /// Cosine k-means on spectral or raw features.
    #[command(group(ArgGroup::new("features").required(true).args(["cube", "image"])))]
    Cluster {
        #[arg(long)]
        cube: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Gap statistic over a range of cluster counts.
    #[command(group(ArgGroup::new("features").required(true).args(["cube", "image"])))]
    Gap {
        #[arg(long)]
        cube: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long)]
        references: Option<usize>,
    },
    /// Generate a synthetic scene with known spectra.
    Phantom {
        /// Scene JSON; defaults to `input.phantom`, then built-in defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Index of the sharpest image in a z-stack (files or one directory).
    Focus {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Compare a reconstruction with phantom ground truth.
    Score {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        /// Image the estimate was fit to, for forward residuals.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Full pipeline: input, reconstruction, rendering and analysis.
    Run {
        #[arg(long)]
        it_max: Option<usize>,
    },
    /// Re-run the command recorded in a manifest with its config.
    Replay { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Calibrate => "calibrate",
            Command::Correct { .. } => "correct",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Render { .. } => "render",
            Command::Cluster { .. } => "cluster",
            Command::Gap { .. } => "gap",
            Command::Phantom { .. } => "phantom",
            Command::Focus { .. } => "focus",
            Command::Score { .. } => "score",
            Command::Run { .. } => "run",
            Command::Replay { .. } => "replay",
        }
    }

    /// Folds subcommand overrides into the config so the manifest records them.
    fn apply_overrides(&self, config: &mut PipelineConfig) {
        match self {
            Command::Reconstruct { it_max: Some(n), .. } | Command::Run { it_max: Some(n) } => {
                config.reconstruction.schedule.it_max = *n;
            }
            Command::Render {
                temperature,
                illuminant,
                ..
            } => {
                if let Some(t) = temperature {
                    config.analysis.temperature = *t;
                }
                if illuminant.is_some() {
                    config.analysis.illuminant_csv = illuminant.clone();
                }
            }
            Command::Cluster { k: Some(k), .. } => config.analysis.k = *k,
            Command::Gap {
                k_min,
                k_max,
                references,
                ..
            } => {
                let a = &mut config.analysis;
                a.gap_k_min = k_min.unwrap_or(a.gap_k_min);
                a.gap_k_max = k_max.unwrap_or(a.gap_k_max);
                a.gap_references = references.unwrap_or(a.gap_references);
            }
            _ => {}
        }
    }
}

/// Resolved config and command; a replay takes both from its manifest.
fn prepare(cli: &Cli) -> anyhow::Result<(PipelineConfig, Option<Command>)> {
    let (mut config, command) = match &cli.command {
        Some(Command::Replay { manifest }) => {
            let manifest = Manifest::load(manifest)?;
            (manifest.config, Some(manifest.command))
        }
        other => {
            let config = match &cli.config {
                Some(path) => PipelineConfig::load(path)?,
                None => PipelineConfig::default(),
            };
            (config, other.clone())
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(threads) = cli.threads {
        config.threads = Some(threads);
    }
    if let Some(output) = &cli.output {
        config.output_dir = output.clone();
    }
    if let Some(command) = &command {
        command.apply_overrides(&mut config);
    }
    let config = config.resolve();
    config.validate()?;
    Ok((config, command))
}

fn execute(cli: &Cli) -> anyhow::Result<u8> {
    let (config, command) = prepare(cli)?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(EXIT_OK);
    }
    let command = command.ok_or_else(|| invalid("no subcommand given (see --help)"))?;
    if let Some(threads) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }
    let mut inputs = commands::inputs(&command, &config);
    if let Some(Command::Replay { manifest }) = &cli.command {
        inputs.push(manifest);
    }
    let mut log = RunLog::new(&config.output_dir, command.name(), &inputs)?;
    match commands::dispatch(&command, &config, &mut log) {
        Ok(outcome) => {
            let status = if outcome.converged == Some(false) {
                Status::NotConverged
            } else {
                Status::Ok
            };
            let path = log.finish(&command, &config, status, None)?;
            eprintln!("manifest: {}", path.display());
            Ok(match status {
                Status::NotConverged => EXIT_NOT_CONVERGED,
                _ => EXIT_OK,
            })
        }
        Err(err) => {
            let code = exit_code(&err);
            // Validation failures happen before compute; only record real failures.
            if code != EXIT_INVALID {
                if let Err(e) = log.finish(&command, &config, Status::Failed, Some(format!("{err:#}"))) {
                    eprintln!("warning: could not write the error manifest: {e:#}");
                }
            }
            Err(err)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
