//! TOML run configuration. Every section is optional; missing keys take the
//! library defaults and unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//! threads = 4
//!
//! [encoder]            # arch, depth, hidden, dropout, norm, message_source
//! arch = "dice"
//!
//! [loss]               # kind, tau, tau_p, tau_n
//! kind = "dice"
//!
//! [train]              # contrastive pretraining: lr, batch_size, epochs
//! epochs = 200
//!
//! [data]
//! heldout = "heldout_dataset"   # else a per-origin held-out fraction
//! heldout_fraction = 0.1
//!
//! [downstream]
//! encoder = { d_d = 2, d_p = 0, d_s = 2, hidden = 512 }
//! decoder = { hidden = 256, dropout = 0.3 }
//! task1 = { lr = 1e-5, epochs = 20000 }
//! ```

use std::path::{Path, PathBuf};

use circuitcl::contrastive::{LossConfig, TrainConfig};
use circuitcl::downstream::{DecoderConfig, EncoderConfig, TaskTrainConfig};
use circuitcl::encoders::EncoderSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub encoder: EncoderSpec,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub downstream: DownstreamSection,
}

/// Optimizer settings; unset keys fall back to the defaults of the stage
/// they configure.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
}

impl TrainSection {
    pub fn pretrain(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            seed,
        }
    }

    pub fn task(&self, defaults: TaskTrainConfig, seed: u64) -> TaskTrainConfig {
        TaskTrainConfig {
            lr: self.lr.unwrap_or(defaults.lr),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            epochs: self.epochs.unwrap_or(defaults.epochs),
            seed,
        }
    }

    /// Flags win over file values.
    pub fn overridden(self, flags: TrainSection) -> TrainSection {
        TrainSection {
            lr: flags.lr.or(self.lr),
            batch_size: flags.batch_size.or(self.batch_size),
            epochs: flags.epochs.or(self.epochs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub heldout: Option<PathBuf>,
    pub heldout_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { heldout: None, heldout_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamSection {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub task1: TrainSection,
    pub task2: TrainSection,
    pub task3: TrainSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.loss.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.encoder.dropout) || !(0.0..=1.0).contains(&self.downstream.decoder.dropout) {
            return Err(CliError::Config("dropout must lie in [0, 1]".into()));
        }
        if self.encoder.hidden == 0 || self.downstream.encoder.hidden == 0 || self.downstream.decoder.hidden == 0 {
            return Err(CliError::Config("hidden sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.heldout_fraction) {
            return Err(CliError::Config("heldout_fraction must lie in [0, 1)".into()));
        }
        let sections = [self.train, self.downstream.task1, self.downstream.task2, self.downstream.task3];
        if sections.iter().any(|s| s.lr.is_some_and(|lr| !(lr > 0.0)) || s.batch_size == Some(0)) {
            return Err(CliError::Config("learning rates and batch sizes must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_library() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.encoder, EncoderSpec::default());
        assert_eq!(cfg.loss, LossConfig::default());
        assert_eq!(cfg.train.pretrain(0), TrainConfig::default());
        assert_eq!(cfg.downstream.task2.task(TaskTrainConfig::task2(), 0), TaskTrainConfig::task2());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[encoder]\nwidth = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nseed = 3").is_err());
        let cfg: RunConfig = toml::from_str("[encoder]\nhidden = 64\narch = \"gin\"").unwrap();
        assert_eq!(cfg.encoder.hidden, 64);
        assert_eq!(cfg.encoder.depth, EncoderSpec::default().depth);
    }

    #[test]
    fn flags_override_file() {
        let file = TrainSection { lr: Some(1.0), batch_size: Some(8), epochs: None };
        let flags = TrainSection { lr: Some(2.0), batch_size: None, epochs: Some(3) };
        assert_eq!(file.overridden(flags), TrainSection { lr: Some(2.0), batch_size: Some(8), epochs: Some(3) });
    }
}
