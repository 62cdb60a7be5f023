use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mining::MiningPolicy;
use crate::model::{AblationFlags, AttentionConfig, DaConfig, EncoderConfig, ModelConfig, PoolingConfig, SemSegConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    /// Encoder, attention, pooling and decoder.
    pub main: OptimizerConfig,
    pub discriminator: OptimizerConfig,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            main: OptimizerConfig::sgd(1e-4),
            discriminator: OptimizerConfig::adam(4e-4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Exponent of the poly decay; its horizon is `train.steps`.
    pub power: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { power: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub steps: usize,
    /// Steps between source-domain validations; 0 validates only at the end.
    pub eval_every: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Random crop and horizontal flip of source triplet images.
    pub augment: bool,
    /// Side of the random crop as a fraction of the image side.
    pub crop_fraction: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            eval_every: 100,
            checkpoint_every: 0,
            augment: true,
            crop_fraction: 0.875,
        }
    }
}

/// Everything `fit` needs besides the data. Serialized as TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub pooling: PoolingConfig,
    pub semseg: SemSegConfig,
    pub da: DaConfig,
    pub ablation: AblationFlags,
    pub mining: MiningPolicy,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleConfig,
    pub train: LoopConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            attention: self.attention.clone(),
            pooling: self.pooling.clone(),
            semseg: self.semseg.clone(),
            da: self.da.clone(),
            ablation: self.ablation,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            margin: self.mining.margin,
            alpha: self.semseg.alpha,
            beta: self.da.beta,
            gamma: self.da.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss_weights().validate()?;
        self.mining.validate()?;
        self.optimizer.main.validate()?;
        self.optimizer.discriminator.validate()?;
        if !(self.schedule.power >= 0.0) {
            return Err(Error::Config("schedule power must be nonnegative".into()));
        }
        if !(self.train.crop_fraction > 0.0 && self.train.crop_fraction <= 1.0) {
            return Err(Error::Config("crop fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}
