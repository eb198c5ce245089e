use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::corpus::GenConfig;
use crate::error::{Error, Result};
use crate::io::read_string;
use crate::model::ModelConfig;
use crate::selection::{SelectionConfig, Strategy};
use crate::tensor::hex;
use crate::trainer::{LrSchedule, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Every knob of a run. Seeds live in `benchmark.seed` (corpus),
/// `model.seed`, `pretrain.seed`, `finetune.seed` and `selection.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub benchmark: GenConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// Selection-split examples scored per seen domain.
    pub importance_samples: usize,
    pub selection: SelectionConfig,
    pub strategy: Strategy,
    pub finetune: TrainConfig,
    /// Test examples decoded per domain; `None` for all of them.
    pub eval_limit: Option<usize>,
    pub index_bins: usize,
    pub sweep_ratios: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            benchmark: GenConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig {
                steps: 2000,
                lr: 2e-3,
                schedule: LrSchedule::WarmupCosine { warmup: 200 },
                ..TrainConfig::default()
            },
            importance_samples: 2000,
            selection: SelectionConfig::default(),
            strategy: Strategy::Caneft,
            finetune: TrainConfig::default(),
            eval_limit: None,
            index_bins: 15,
            sweep_ratios: vec![0.0025, 0.005, 0.0075, 0.01, 0.0125, 0.015],
        }
    }
}

impl PipelineConfig {
    /// A scaled-down benchmark and model whose whole pipeline runs in about a
    /// minute on one core. Used by the examples.
    pub fn quick() -> Self {
        let benchmark = GenConfig {
            selection_per_domain: 400,
            finetune_per_domain: 200,
            test_per_domain: 60,
            pretrain_examples: 6000,
            ..GenConfig::default()
        };
        let model = ModelConfig {
            n_layers: 2,
            d_model: 64,
            d_ffn: 128,
            n_heads: 4,
            ..ModelConfig::default()
        };
        let mut c = Self {
            benchmark,
            model,
            importance_samples: 300,
            ..Self::default()
        };
        c.finetune.steps = 1000;
        c.selection.budget_ratio = 0.05;
        c.selection.pool_ratio = 0.25;
        c.sweep_ratios = vec![0.025, 0.05, 0.1];
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {}",
                self.schema_version
            )));
        }
        self.benchmark.validate()?;
        self.model.validate()?;
        self.benchmark.check_model(&self.model)?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.selection.validate()?;
        if self.importance_samples == 0 || self.importance_samples > self.benchmark.selection_per_domain {
            return Err(Error::Config(format!(
                "importance_samples must lie in 1..={}, got {}",
                self.benchmark.selection_per_domain, self.importance_samples
            )));
        }
        if self.index_bins == 0 {
            return Err(Error::Config("index_bins must be positive".into()));
        }
        if let Some(r) = self.sweep_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("sweep ratio {r} is outside (0, 1]")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes))
    }

    /// Applies `a.b.c=value` overrides. The value is parsed as JSON when it
    /// can be, and taken as a plain string otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, p) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("{key}: {p:?} is not inside an object")))?;
                if !obj.contains_key(*p) {
                    return Err(Error::Config(format!("unknown config key {key:?}")));
                }
                if i + 1 == parts.len() {
                    obj.insert((*p).to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*p).expect("checked above");
            }
        }
        serde_json::from_value(root).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        PipelineConfig::quick().validate().unwrap();
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), c);
        assert_eq!(c.hash(), c.clone().hash());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = PipelineConfig::default()
            .with_overrides(&[
                "finetune.steps=20".into(),
                "strategy=rcn".into(),
                "eval_limit=5".into(),
                "selection.budget_ratio=0.02".into(),
            ])
            .unwrap();
        assert_eq!(c.finetune.steps, 20);
        assert_eq!(c.strategy, Strategy::Rcn);
        assert_eq!(c.eval_limit, Some(5));
        assert_eq!(c.selection.budget_ratio, 0.02);
        assert_ne!(c.hash(), PipelineConfig::default().hash());
        let bad = PipelineConfig::default();
        assert!(matches!(bad.with_overrides(&["finetune.stepz=1".into()]), Err(Error::Config(_))));
        assert!(matches!(bad.with_overrides(&["strategy=nope".into()]), Err(Error::Config(_))));
        assert!(bad.with_overrides(&["novalue".into()]).is_err());
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let mut c = PipelineConfig::default();
        c.model.vocab_size = 50;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
