//! Run configuration: named presets plus partial overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::contrastive::ContrastiveConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::InputLimits;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Pre-training steps.
    pub steps: u64,
    /// Maximum fine-tuning epochs.
    pub epochs: usize,
    pub finetune_batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Save a checkpoint every this many pre-training steps; 0 saves only the last.
    pub checkpoint_every: u64,
    /// Log a validation MRR every this many pre-training steps; 0 disables it.
    pub eval_every: u64,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lr) || !positive(self.finetune_lr) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction {} is outside [0, 1]",
                self.warmup_fraction
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if self.clip_norm.is_some_and(|c| !positive(c)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if self.finetune_batch_size == 0 {
            return Err(Error::Config("fine-tuning batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub preset: String,
    /// `vocab_size` is filled in once the vocabulary is known.
    pub encoder: EncoderConfig,
    pub limits: InputLimits,
    pub contrastive: ContrastiveConfig,
    pub training: TrainingConfig,
    pub max_vocab: usize,
}

impl RunConfig {
    /// Two layers at width 128, batch 16, queue 512, 500 pre-training steps and
    /// 5 fine-tuning epochs.
    pub fn toy() -> Self {
        Self {
            version: CONFIG_VERSION,
            preset: "toy".into(),
            encoder: EncoderConfig::toy(0),
            limits: InputLimits::default(),
            contrastive: ContrastiveConfig::toy(),
            training: TrainingConfig {
                steps: 500,
                epochs: 5,
                finetune_batch_size: 16,
                lr: 5e-4,
                finetune_lr: 5e-4,
                warmup_fraction: 0.1,
                weight_decay: 0.01,
                clip_norm: Some(1.0),
                seed: 0,
                checkpoint_every: 0,
                eval_every: 0,
            },
            max_vocab: 8_192,
        }
    }

    pub fn paper() -> Self {
        Self {
            version: CONFIG_VERSION,
            preset: "paper".into(),
            encoder: EncoderConfig::paper(0),
            limits: InputLimits::default(),
            contrastive: ContrastiveConfig::paper(),
            training: TrainingConfig {
                steps: 100_000,
                epochs: 5,
                finetune_batch_size: 128,
                lr: 2e-5,
                finetune_lr: 2e-5,
                warmup_fraction: 0.1,
                weight_decay: 0.01,
                clip_norm: Some(1.0),
                seed: 0,
                checkpoint_every: 10_000,
                eval_every: 0,
            },
            max_vocab: 51_451,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected toy or paper"
            ))),
        }
    }

    /// Applies a partial JSON document on top of the preset it names (or `toy`).
    pub fn from_overrides(overrides: Value) -> Result<Self> {
        let preset = overrides.get("preset").and_then(Value::as_str).unwrap_or("toy");
        let base = Self::preset(preset)?;
        if let Some(v) = overrides.get("version") {
            let found = v.as_u64().unwrap_or(0) as u32;
            if found != CONFIG_VERSION {
                return Err(Error::Version {
                    what: "config",
                    found,
                    expected: CONFIG_VERSION,
                });
            }
        }
        let mut merged = serde_json::to_value(base)?;
        merge(&mut merged, overrides);
        let cfg: Self = serde_json::from_value(merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.max_len < self.limits.longest() {
            return Err(Error::Config(format!(
                "encoder has {} positions but inputs may be {} long",
                self.encoder.max_len,
                self.limits.longest()
            )));
        }
        if self.limits.code_max_len < 2 || self.limits.query_max_len < 2 {
            return Err(Error::Config(
                "length limits must leave room for [CLS] and [SEP]".into(),
            ));
        }
        self.contrastive.validate()?;
        self.training.validate()
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_validate() {
        RunConfig::toy().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        let p = RunConfig::paper();
        assert_eq!((p.encoder.layers, p.encoder.hidden_dim, p.encoder.heads), (12, 768, 12));
        assert_eq!((p.limits.code_max_len, p.limits.query_max_len), (128, 256));
        assert_eq!((p.contrastive.queue_size, p.contrastive.batch_size), (4096, 128));
        assert_eq!(p.training.lr, 2e-5);
        assert_eq!(p.training.steps, 100_000);
        assert_eq!(p.training.epochs, 5);
        assert_eq!((p.contrastive.temperature, p.contrastive.momentum), (0.07, 0.999));
        assert_eq!(p.max_vocab, 51_451);
        assert!(p.encoder.share_code_query);
        let t = RunConfig::toy();
        assert_eq!(
            (
                t.encoder.layers,
                t.encoder.hidden_dim,
                t.encoder.heads,
                t.encoder.ffn_dim
            ),
            (2, 128, 4, 512)
        );
        assert_eq!((t.contrastive.batch_size, t.contrastive.queue_size), (16, 512));
        assert_eq!((t.training.steps, t.training.epochs, t.max_vocab), (500, 5, 8192));
    }

    #[test]
    fn overrides_merge_deeply() {
        let cfg = RunConfig::from_overrides(json!({
            "preset": "toy",
            "training": {"steps": 7, "seed": 3},
            "contrastive": {"temperature": 0.05}
        }))
        .unwrap();
        assert_eq!(cfg.training.steps, 7);
        assert_eq!(cfg.training.seed, 3);
        assert_eq!(cfg.training.epochs, 5);
        assert_eq!(cfg.contrastive.temperature, 0.05);
        assert_eq!(cfg.contrastive.queue_size, 512);
    }

    #[test]
    fn overrides_reject_bad_values() {
        assert!(RunConfig::from_overrides(json!({"version": 9})).is_err());
        assert!(RunConfig::from_overrides(json!({"preset": "huge"})).is_err());
        assert!(RunConfig::from_overrides(json!({"contrastive": {"temperature": 0.0}})).is_err());
        assert!(RunConfig::from_overrides(json!({"training": {"lr": -1.0}})).is_err());
    }
}
