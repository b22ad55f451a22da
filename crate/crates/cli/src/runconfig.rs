//! JSON run configuration: every section optional, defaults are the desk
//! scale, unknown keys rejected.

use serde::{Deserialize, Serialize};

use hitok_core::generator::sampling::SamplingParams;
use hitok_core::generator::GenConfig;
use hitok_core::train::TrainConfig;
use hitok_core::vae::HierarchyConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    pub shape: [usize; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            count: 256,
            seed: 11,
            shape: [16, 32, 32],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub hierarchy: HierarchyConfig,
    pub tokenizer_train: TrainConfig,
    pub generator: GenConfig,
    pub generator_train: TrainConfig,
    pub sampling: SamplingParams,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hierarchy: HierarchyConfig::desk_default(),
            tokenizer_train: TrainConfig::default(),
            generator: GenConfig::default(),
            generator_train: TrainConfig::default(),
            sampling: SamplingParams::default(),
            data: DataConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_resolves_to_desk_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.hierarchy, HierarchyConfig::desk_default());
        assert_eq!(cfg.tokenizer_train.steps, 2000);
        assert_eq!(cfg.data.count, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"not_a_section": 1}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"tokenizer_train": {"stepz": 5}}"#).is_err()
        );
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"tokenizer_train": {"steps": 7, "seed": 3}}"#).unwrap();
        assert_eq!(cfg.tokenizer_train.steps, 7);
        assert_eq!(cfg.tokenizer_train.seed, 3);
        assert!((cfg.tokenizer_train.lr - 3e-4).abs() < 1e-12);
        assert_eq!(cfg.generator_train.steps, 2000);
    }
}
