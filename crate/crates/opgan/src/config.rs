//! Training-run configuration, loadable from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{DiscriminatorArch, GeneratorArch};
use crate::signal::{STFT_HOP, STFT_LEN};
use crate::util::atomic_write;

/// Everything a training run needs besides the data itself. Serialized
/// alongside checkpoints so a run can be resumed or reproduced exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total backpropagation iterations (one pair each).
    pub max_iters: usize,
    /// Pairs per update; the reference setup trains with 1.
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Weights of the adversarial, time, and spectral terms.
    pub weights: LossWeights,
    pub seed: u64,
    pub generator: GeneratorArch,
    pub discriminator: DiscriminatorArch,
    /// Transform length of the spectral loss.
    pub stft_len: usize,
    /// Hop of the spectral loss.
    pub stft_hop: usize,
    /// Save a checkpoint every this many iterations; 0 keeps only the final
    /// state.
    pub checkpoint_interval: usize,
    /// Record real wall-clock times in the loss log. Off by default so that
    /// two identical runs write byte-identical logs.
    pub timing_log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iters: 5000,
            batch_size: 1,
            lr_generator: 1e-5,
            lr_discriminator: 2e-5,
            weights: LossWeights::default(),
            seed: 0,
            generator: GeneratorArch::default(),
            discriminator: DiscriminatorArch::default(),
            stft_len: STFT_LEN,
            stft_hop: STFT_HOP,
            checkpoint_interval: 0,
            timing_log: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr_generator > 0.0) || !(self.lr_discriminator > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got {} and {}",
                self.lr_generator, self.lr_discriminator
            )));
        }
        self.weights.validate()?;
        if self.stft_len == 0 || self.stft_len % 2 != 0 {
            return Err(Error::Config(format!(
                "spectral-loss transform length must be even and positive, got {}",
                self.stft_len
            )));
        }
        if self.stft_hop == 0 {
            return Err(Error::Config("spectral-loss hop must be at least 1".into()));
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("could not serialize config: {e}")))
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json_string()?.as_bytes())
    }
}
