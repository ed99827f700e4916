use std::path::Path;

use serde::{Deserialize, Serialize};
use tam_core::arch::NetConfig;
use tam_core::synth::DatasetSpec;
use tam_core::train::{EvalProtocol, TrainConfig};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// One experiment: data, network, optimisation and evaluation.
///
/// `seed` draws the initial weights; `train.seed` orders the minibatches and
/// `dataset.seed` generates the clips, so each source of randomness can be
/// varied on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetSpec::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.config_version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        self.dataset.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.net.frames > self.dataset.frames {
            return Err(CliError::Config(format!(
                "network wants {} frames but clips have {}",
                self.net.frames, self.dataset.frames
            )));
        }
        if self.net.num_classes != self.dataset.num_classes() {
            return Err(CliError::Config(format!(
                "network has {} classes but the {:?} task has {}",
                self.net.num_classes,
                self.dataset.task,
                self.dataset.num_classes()
            )));
        }
        if self.net.in_channels != self.dataset.channels {
            return Err(CliError::Config(format!(
                "network takes {} input channels but clips have {}",
                self.net.in_channels, self.dataset.channels
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
