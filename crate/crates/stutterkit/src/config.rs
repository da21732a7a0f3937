//! Run-level configuration: a single JSON file that captures everything a
//! command needs, hashed so every output can be traced back to the exact
//! configuration that produced it.
//!
//! Commands resolve their settings config-file-first: values come from the
//! file when `--config` is given (defaults otherwise) and individual flags
//! override single fields. The fully resolved configuration is echoed into
//! the output directory next to the artifacts it produced, together with a
//! content hash that also appears in every [`RunReport`](crate::metrics::RunReport).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

/// Environment variable that overrides the configured seeds.
pub const SEED_ENV_VAR: &str = "SK_SEED";

/// File name used for the resolved-config echo inside an output directory.
pub const RESOLVED_CONFIG_FILE: &str = "resolved-config.json";

/// Top-level run configuration.
///
/// Mirrors the full pipeline: training (which embeds the model and feature
/// configurations), corpus synthesis, augmentation-pool location, manifest
/// paths, and the output directory. Unknown keys are rejected so a typoed
/// field never silently falls back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// Optimization, model, and feature settings.
    pub train: TrainConfig,
    /// Synthetic-corpus settings used by `synth`.
    pub synth: SynthSpec,
    /// Root directory scanned for `music/`, `noise/`, `speech/`, and
    /// optional `rir/` pools used by `augment`.
    pub pool_dir: Option<PathBuf>,
    /// Default manifest consumed by `train`, `features`, and `split`.
    pub manifest: Option<PathBuf>,
    /// Default output directory for run artifacts.
    pub out_dir: PathBuf,
    /// Number of cross-validation folds built by `split` and `train`.
    pub n_folds: usize,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            pool_dir: None,
            manifest: None,
            out_dir: PathBuf::from("runs"),
            n_folds: 10,
        }
    }
}

impl RunConfigFile {
    /// Validates every embedded section plus the run-level fields.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.n_folds < 2 {
            return Err(Error::Config(format!(
                "need at least 2 folds, got {}",
                self.n_folds
            )));
        }
        Ok(())
    }

    /// Loads a config file, rejecting unknown keys.
    pub fn load(path: &Path) -> Result<RunConfigFile> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Applies the `SK_SEED` environment override to both the training and
    /// synthesis seeds. Returns the override value when one was applied.
    pub fn apply_env_seed(&mut self) -> Result<Option<u64>> {
        match std::env::var(SEED_ENV_VAR) {
            Ok(text) => {
                let seed: u64 = text.trim().parse().map_err(|_| {
                    Error::Config(format!("{SEED_ENV_VAR} must be an unsigned integer, got {text:?}"))
                })?;
                self.train.seed = seed;
                self.synth.seed = seed;
                Ok(Some(seed))
            }
            Err(std::env::VarError::NotPresent) => Ok(None),
            Err(e) => Err(Error::Config(format!("cannot read {SEED_ENV_VAR}: {e}"))),
        }
    }
}

/// Content hash of any serializable config: SHA-256 over its canonical JSON,
/// as lowercase hex.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value)
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    let digest = Sha256::digest(json.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}

/// Serialized form of the resolved-config echo: the hash plus the exact
/// configuration it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config_hash: String,
    pub config: RunConfigFile,
}

/// Writes the resolved configuration beside the run outputs and returns its
/// content hash. The hash covers the config alone, so re-running with the
/// same settings reproduces the same hash.
pub fn write_resolved_config(out_dir: &Path, cfg: &RunConfigFile) -> Result<String> {
    let hash = config_hash(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let echo = ResolvedConfig {
        config_hash: hash.clone(),
        config: cfg.clone(),
    };
    let text = serde_json::to_string_pretty(&echo)
        .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    let path = out_dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(hash)
}
