use std::path::Path;

use anyhow::Context;
use mdr_core::data::SyntheticGenConfig;
use mdr_core::encoders::EncoderConfig;
use mdr_core::eval::Protocol;
use mdr_core::regimes::{SizePreset, TrainConfig};
use serde::{Deserialize, Serialize};

/// Model settings not implied by the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub preset: SizePreset,
    pub temperature: f64,
    pub encoder: EncoderConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: SizePreset::Small,
            temperature: 0.01,
            encoder: EncoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub pool_seed: u64,
    /// One split-wide candidate set per modality instead of per-example draws.
    pub shared_pool: bool,
    pub protocols: Vec<Protocol>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pool_seed: 0,
            shared_pool: false,
            protocols: Protocol::ALL.to_vec(),
        }
    }
}

/// Every command reads the section it needs; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticGenConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| mdr_core::Error::Config(format!("{}: {e}", path.display())))
            .map_err(Into::into)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"train": {"batch_size": 8}, "data": {"seed": 3}}"#).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.epochs.image, 20);
        assert_eq!(cfg.data.seed, 3);
        assert_eq!(cfg.model, ModelSection::default());
    }

    #[test]
    fn unknown_section_is_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }
}
