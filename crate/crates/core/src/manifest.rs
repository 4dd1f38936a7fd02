//! Training-stage manifests for an external SFT / reward-model / RLHF trainer.
//! All three stages point at the same selected dataset.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sft,
    Reward,
    Rlhf,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Sft, Stage::Reward, Stage::Rlhf];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Reward => "reward",
            Stage::Rlhf => "rlhf",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "sft" => Ok(Stage::Sft),
            "reward" => Ok(Stage::Reward),
            "rlhf" => Ok(Stage::Rlhf),
            other => Err(Error::UnknownStage(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HyperValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<i64> for HyperValue {
    fn from(v: i64) -> Self {
        HyperValue::Int(v)
    }
}

impl From<f64> for HyperValue {
    fn from(v: f64) -> Self {
        HyperValue::Float(v)
    }
}

impl From<&str> for HyperValue {
    fn from(v: &str) -> Self {
        HyperValue::Text(v.to_owned())
    }
}

/// LoRA settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdapterSettings {
    pub rank: u32,
    pub alpha: u32,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub stage: Stage,
    pub dataset_path: String,
    pub hyperparameters: BTreeMap<String, HyperValue>,
    pub adapter: AdapterSettings,
}

fn params(entries: Vec<(&str, HyperValue)>) -> BTreeMap<String, HyperValue> {
    entries.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

/// The fixed hyperparameters for `stage`, pointing at `dataset_path`.
pub fn canonical_manifest(stage: Stage, dataset_path: &str) -> TrainingManifest {
    let (hyperparameters, adapter) = match stage {
        Stage::Sft => (
            params(vec![
                ("learning_rate", 1e-5.into()),
                ("max_steps", 5000.into()),
                ("epochs", 1.into()),
                ("optimizer", "adamw".into()),
                ("lr_scheduler", "cosine".into()),
                ("max_text_length", 512.into()),
                ("batch_size", 4.into()),
                ("gradient_accumulation_steps", 1.into()),
                ("weight_decay", 0.05.into()),
            ]),
            AdapterSettings {
                rank: 16,
                alpha: 32,
                dropout: 0.05,
            },
        ),
        Stage::Reward => (
            params(vec![
                ("learning_rate", 2e-5.into()),
                ("epochs", 1.into()),
                ("optimizer", "adamw".into()),
                ("lr_scheduler", "linear".into()),
                ("max_text_length", 512.into()),
                ("batch_size", 4.into()),
                ("gradient_accumulation_steps", 1.into()),
                ("weight_decay", 0.001.into()),
            ]),
            AdapterSettings {
                rank: 8,
                alpha: 32,
                dropout: 0.1,
            },
        ),
        Stage::Rlhf => (
            params(vec![
                ("learning_rate", 1.41e-5.into()),
                ("max_steps", 20000.into()),
                ("epochs", 4.into()),
                ("min_generation_length", 32.into()),
                ("max_generation_length", 128.into()),
                ("ppo_minibatch_size", 1.into()),
                ("batch_size", 32.into()),
                ("gradient_accumulation_steps", 4.into()),
            ]),
            AdapterSettings {
                rank: 16,
                alpha: 32,
                dropout: 0.05,
            },
        ),
    };
    TrainingManifest {
        stage,
        dataset_path: dataset_path.to_owned(),
        hyperparameters,
        adapter,
    }
}

/// Parses `stage` and returns its manifest.
pub fn emit_manifest(stage: &str, dataset_path: &str) -> Result<TrainingManifest, Error> {
    Ok(canonical_manifest(stage.parse()?, dataset_path))
}
