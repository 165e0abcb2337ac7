use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masking::CurriculumSchedule;
use crate::model::ModelConfig;

/// What the knowledge teacher sees when producing distillation targets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KtInput {
    /// Encoder features over the complete cloud.
    #[default]
    Full,
    /// Decoder features at masked positions given only the visible patches.
    Visible,
}

/// Per-patch loss that ranks patches for the complexity loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GcTarget {
    /// Chamfer plus feature error once distillation is active.
    #[default]
    Combined,
    Chamfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub cosine: bool,
    /// EMA coefficient of the teacher.
    pub momentum: f64,
    pub ema_enabled: bool,
    pub augment: bool,
    /// Epochs of plain random-masking pretraining for the knowledge teacher.
    pub bootstrap_epochs: usize,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub kt_input: KtInput,
    pub gc_target: GcTarget,
    pub loss: LossWeights,
    pub curriculum: CurriculumSchedule,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 60,
            batch_size: 8,
            base_lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            cosine: true,
            momentum: 0.999,
            ema_enabled: true,
            augment: true,
            bootstrap_epochs: 30,
            checkpoint_every: 0,
            kt_input: KtInput::Full,
            gc_target: GcTarget::Combined,
            loss: LossWeights::default(),
            curriculum: CurriculumSchedule::default(),
            model: ModelConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.epochs < 1 {
            return cfg("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return cfg("batch_size must be >= 1".into());
        }
        for (name, v) in [("base_lr", self.base_lr), ("adam_eps", self.adam_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return cfg(format!("{name} must be > 0, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return cfg(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("momentum", self.momentum)] {
            if !(0.0..1.0).contains(&v) {
                return cfg(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.curriculum.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Loads a JSON config, rejecting unknown keys, and validates it.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Replaces one top-level scalar key with `value` (parsed as JSON, or
    /// taken as a string if that fails).
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self> {
        let mut doc = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        let obj = doc.as_object_mut().expect("config serializes to an object");
        match obj.get(key) {
            None => return Err(Error::Config(format!("unknown config key `{key}`"))),
            Some(v) if v.is_object() || v.is_array() => {
                return Err(Error::Config(format!("`{key}` is not a top-level scalar")))
            }
            Some(_) => {}
        }
        let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.into()));
        obj.insert(key.to_string(), parsed);
        let c: TrainConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}
