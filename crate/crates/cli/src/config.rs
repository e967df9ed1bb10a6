//! The JSON run configuration and its merge with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use p2n_core::denoiser::{ArchConfig, PretrainConfig};
use p2n_core::engine::{NormMode, TrainConfig};
use p2n_core::evaluation::AblationAxis;
use p2n_core::noise::NoiseSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Documented key schema of `--config` files. Every section is optional;
/// flags given on the command line win over the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; when set it replaces `pretrain.seed` and `train.seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Maximum number of per-image trainings in flight.
    pub jobs: usize,
    pub paths: Paths,
    pub arch: ArchConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    /// Noise synthesized by `synth-corpus`.
    pub noise: NoiseSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationAxis>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            jobs: 1,
            paths: Paths::default(),
            arch: ArchConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            noise: NoiseSpec::Gaussian { sigma: 25.0 / 255.0 },
            ablation: None,
        }
    }
}

/// Flags shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub sigma: Option<f64>,
    pub iterations: Option<usize>,
    pub lr: Option<f64>,
    pub norm: Option<NormMode>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config: cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    /// Applies flags. `--iterations` and `--lr` address the pretraining
    /// section for `pretrain` and the per-image section otherwise.
    pub fn apply(&mut self, o: &Overrides, pretraining: bool) {
        if let Some(seed) = o.seed {
            self.seed = Some(seed);
        }
        if let Some(seed) = self.seed {
            self.pretrain.seed = seed;
            self.train.seed = seed;
        }
        if let Some(jobs) = o.jobs {
            self.jobs = jobs;
        }
        if let Some(out) = &o.out {
            self.paths.output = Some(out.clone());
        }
        if let Some(sigma) = o.sigma {
            self.train.sigma = sigma;
        }
        if let Some(norm) = o.norm {
            self.train.norm = norm;
        }
        if let Some(ckpt) = &o.checkpoint {
            self.paths.checkpoint = Some(ckpt.clone());
        }
        match pretraining {
            true => {
                if let Some(n) = o.iterations {
                    self.pretrain.iterations = n;
                }
                if let Some(lr) = o.lr {
                    self.pretrain.learning_rate = lr;
                }
            }
            false => {
                if let Some(n) = o.iterations {
                    self.train.iterations = n;
                }
                if let Some(lr) = o.lr {
                    self.train.learning_rate = lr;
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.jobs == 0 {
            return Err(CliError::usage("jobs: must be at least 1"));
        }
        for (field, path) in [
            ("paths.input", &self.paths.input),
            ("paths.clean", &self.paths.clean),
            ("paths.checkpoint", &self.paths.checkpoint),
            ("paths.corpus", &self.paths.corpus),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(CliError::usage(format!("{field}: {} does not exist", p.display())));
                }
            }
        }
        self.arch.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.noise.validate()?;
        Ok(())
    }

    /// `--out`, else `paths.output`, else `$P2N_RUN_DIR/<command>`, else
    /// `runs/<command>`; created if missing.
    pub fn output_dir(&self, command: &str) -> Result<PathBuf, CliError> {
        let dir = match (&self.paths.output, std::env::var_os("P2N_RUN_DIR")) {
            (Some(p), _) => p.clone(),
            (None, Some(root)) => PathBuf::from(root).join(command),
            (None, None) => PathBuf::from("runs").join(command),
        };
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::usage(format!("paths.output: cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    pub fn require<'a>(&self, field: &str, value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::usage(format!("{field}: required (set it in the config or pass {flag})")))
    }
}
