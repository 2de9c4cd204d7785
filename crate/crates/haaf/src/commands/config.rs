//! Per-command config documents. One JSON file per run; unknown keys are
//! rejected so typos surface immediately.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::models::{ModelConfig, ModelVariant};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenCommandConfig {
    pub generator: GenConfig,
    /// Fold-assignment seed; defaults to the generator seed.
    pub folds_seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCommandConfig {
    /// Directory holding `manifest.json` and the bag file it names.
    pub data_dir: PathBuf,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Train a single rotation instead of full 5-fold cross-validation.
    pub fold: Option<usize>,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        TrainCommandConfig {
            data_dir: PathBuf::from("."),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            fold: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalCommandConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub model: ModelConfig,
    pub variant: ModelVariant,
    pub fold: usize,
    pub split: Split,
    pub normalize_tabular: bool,
}

impl Default for EvalCommandConfig {
    fn default() -> Self {
        EvalCommandConfig {
            data_dir: PathBuf::from("."),
            checkpoint: PathBuf::from("best.ckpt"),
            model: ModelConfig::default(),
            variant: ModelVariant::HyperAdag,
            fold: 0,
            split: Split::Test,
            normalize_tabular: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateCommandConfig {
    pub data_dir: PathBuf,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// One training run per seed per variant; `train.variant` is ignored.
    pub seeds: Vec<u64>,
    /// Run all 5 rotations per seed instead of rotation = seed index % 5.
    pub full_cv: bool,
}

impl Default for AblateCommandConfig {
    fn default() -> Self {
        AblateCommandConfig {
            data_dir: PathBuf::from("."),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            full_cv: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportAttentionCommandConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub model: ModelConfig,
    pub variant: ModelVariant,
    pub fold: usize,
    pub split: Split,
    pub normalize_tabular: bool,
}

impl Default for ExportAttentionCommandConfig {
    fn default() -> Self {
        ExportAttentionCommandConfig {
            data_dir: PathBuf::from("."),
            checkpoint: PathBuf::from("best.ckpt"),
            model: ModelConfig::default(),
            variant: ModelVariant::HyperAdag,
            fold: 0,
            split: Split::Test,
            normalize_tabular: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = serde_json::from_str::<GenCommandConfig>("{\"generatr\": {}}").unwrap_err();
        assert!(err.to_string().contains("generatr"), "{err}");
    }

    #[test]
    fn empty_configs_use_defaults() {
        let cfg: TrainCommandConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.patience, 50);
        let cfg: AblateCommandConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.seeds.len(), 5);
    }
}
