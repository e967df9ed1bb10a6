//! `p2n`: pretraining, per-image self-supervised denoising, noise analysis,
//! evaluation and ablations.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
//! 3 finished but some image collapsed to a trivial solution.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use p2n_core::engine::NormMode;
use p2n_core::noise::NoiseSpec;

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "p2n", version, about = "Self-supervised single-image denoising")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Images trained concurrently.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Output directory [default: $P2N_RUN_DIR/<command>, else runs/<command>].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Width of the renoising scale distribution N(1, sigma).
    #[arg(long, global = true, value_name = "F")]
    sigma: Option<f64>,
    #[arg(long, global = true, value_name = "N")]
    iterations: Option<usize>,
    #[arg(long, global = true, value_name = "F")]
    lr: Option<f64>,
    #[arg(long, global = true, value_parser = parse_norm, value_name = "varying|fixed-2|fixed-1.5")]
    norm: Option<NormMode>,
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

fn parse_norm(s: &str) -> Result<NormMode, String> {
    s.parse().map_err(|e: p2n_core::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Supervised Gaussian pretraining on a clean corpus.
    Pretrain {
        /// Directory of clean images (its gt/ subdirectory if present) or a manifest.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Fine-tune a copy of the pretrained model on each noisy image and write the result.
    Denoise {
        /// Noisy image, manifest JSON, or directory.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Clean reference for a single input image.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
    /// Residual statistics of noisy images against their clean references.
    AnalyzeNoise {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        clean: Option<PathBuf>,
    },
    /// Denoise a referenced dataset and tabulate PSNR/SSIM.
    Eval {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Rerun evaluation for each value along one configuration axis.
    Ablate {
        #[arg(long)]
        input: Option<PathBuf>,
        /// sigma, norm-mode or component.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values along the axis.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Option<Vec<String>>,
    },
    /// Write a procedural clean/noisy corpus with a manifest.
    SynthCorpus {
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Gaussian noise level in intensity units (replaces the config's noise section).
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Pretrain { .. } => "pretrain",
            Command::Denoise { .. } => "denoise",
            Command::AnalyzeNoise { .. } => "analyze-noise",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::SynthCorpus { .. } => "synth-corpus",
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let c = cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: c.seed,
        jobs: c.jobs,
        out: c.out,
        sigma: c.sigma,
        iterations: c.iterations,
        lr: c.lr,
        norm: c.norm,
        checkpoint: c.checkpoint,
    };
    cfg.apply(&overrides, matches!(cli.command, Command::Pretrain { .. }));
    match &cli.command {
        Command::Pretrain { corpus } => {
            if let Some(p) = corpus {
                cfg.paths.corpus = Some(p.clone());
            }
        }
        Command::Denoise { input, clean } | Command::AnalyzeNoise { input, clean } => {
            if let Some(p) = input {
                cfg.paths.input = Some(p.clone());
            }
            if let Some(p) = clean {
                cfg.paths.clean = Some(p.clone());
            }
        }
        Command::Eval { input } => {
            if let Some(p) = input {
                cfg.paths.input = Some(p.clone());
            }
        }
        Command::Ablate { input, axis, values } => {
            if let Some(p) = input {
                cfg.paths.input = Some(p.clone());
            }
            match (axis, values) {
                (Some(a), Some(v)) => cfg.ablation = Some(commands::parse_axis(a, v)?),
                (None, None) => {}
                _ => return Err(CliError::usage("axis and values must be given together")),
            }
        }
        Command::SynthCorpus { noise_sigma, .. } => {
            if let Some(sigma) = noise_sigma {
                cfg.noise = NoiseSpec::Gaussian { sigma: *sigma };
            }
        }
    }
    cfg.validate()?;
    let out = cfg.output_dir(cli.command.name())?;
    match cli.command {
        Command::Pretrain { .. } => commands::pretrain(&cfg, &out),
        Command::Denoise { .. } => commands::denoise(&cfg, &out),
        Command::AnalyzeNoise { .. } => commands::analyze_noise(&cfg, &out),
        Command::Eval { .. } => commands::eval(&cfg, &out),
        Command::Ablate { .. } => commands::ablate(&cfg, &out),
        Command::SynthCorpus { count, size, channels, .. } => commands::synth_corpus(&cfg, &out, count, size, channels),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
