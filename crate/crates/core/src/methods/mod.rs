//! Training procedures: pretraining from scratch and the adapter-based
//! forgetting methods.

mod pretrain;
mod train;
mod tune;

pub use pretrain::{
    load_training_state, pretrain, probe_subset, save_training_state, PretrainConfig,
    PretrainOutcome, ProbeConfig, TrainingState,
};
pub use train::{doc_examples, epoch_order, qa_example, Example};
pub use tune::{
    negative_gradient, negative_task_vector, sanitization_tune, sanitize_without_retain,
    standard_finetune, TaskVectorOutcome, Tuned,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{DEFAULT_RANK, DEFAULT_ROLES};
use crate::error::{Error, Result};
use crate::model::MatrixRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodId {
    #[serde(rename = "pretrain")]
    Pretrain,
    #[serde(rename = "standard-ft")]
    StandardFt,
    #[serde(rename = "sanitize")]
    Sanitize,
    #[serde(rename = "sanitize-no-KR")]
    SanitizeNoKr,
    #[serde(rename = "neg-grad")]
    NegGrad,
    #[serde(rename = "neg-task-vector")]
    NegTaskVector,
}

impl MethodId {
    /// The forgetting methods applied on top of a pretrained model.
    pub const TUNING: [MethodId; 5] = [
        MethodId::NegGrad,
        MethodId::NegTaskVector,
        MethodId::Sanitize,
        MethodId::SanitizeNoKr,
        MethodId::StandardFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::Pretrain => "pretrain",
            MethodId::StandardFt => "standard-ft",
            MethodId::Sanitize => "sanitize",
            MethodId::SanitizeNoKr => "sanitize-no-KR",
            MethodId::NegGrad => "neg-grad",
            MethodId::NegTaskVector => "neg-task-vector",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [MethodId::Pretrain]
            .into_iter()
            .chain(MethodId::TUNING)
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method `{s}` (expected pretrain, standard-ft, sanitize, sanitize-no-KR, neg-grad or neg-task-vector)"
                ))
            })
    }
}

/// Which next-token predictions count toward the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMask {
    FullSequence,
    AnswerOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub roles: Vec<MatrixRole>,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            roles: DEFAULT_ROLES.to_vec(),
            rank: DEFAULT_RANK,
            alpha: 16.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub method: MethodId,
    pub learning_rate: f64,
    /// Passes over the recipe's data.
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub batch_size: usize,
    pub loss_mask: LossMask,
    pub lora: LoraConfig,
    pub seed: u64,
    /// Multiplier on the task vector before it is subtracted; read only by
    /// neg-task-vector.
    #[serde(default = "unit_scale")]
    pub task_vector_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl TrainRecipe {
    /// Default hyperparameters for a method.
    pub fn for_method(method: MethodId) -> Self {
        let base = TrainRecipe {
            method,
            learning_rate: 1e-3,
            epochs: 10,
            max_steps: 0,
            batch_size: 16,
            loss_mask: LossMask::FullSequence,
            lora: LoraConfig::default(),
            seed: 0,
            task_vector_scale: 1.0,
        };
        match method {
            MethodId::Pretrain => TrainRecipe {
                epochs: 400,
                max_steps: 30_000,
                batch_size: 32,
                ..base
            },
            // stops early once no K_F answer is reproduced
            MethodId::NegGrad => TrainRecipe { epochs: 30, ..base },
            MethodId::NegTaskVector => TrainRecipe {
                task_vector_scale: 4.0,
                ..base
            },
            MethodId::SanitizeNoKr => TrainRecipe {
                learning_rate: 3e-2,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{} recipe: {what}", self.method)));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.task_vector_scale > 0.0 && self.task_vector_scale.is_finite()) {
            return bad("task_vector_scale must be positive");
        }
        if self.method != MethodId::Pretrain {
            if self.lora.rank == 0 {
                return bad("lora.rank must be positive");
            }
            if !(self.lora.alpha > 0.0 && self.lora.alpha.is_finite()) {
                return bad("lora.alpha must be positive");
            }
            if self.lora.roles.is_empty() {
                return bad("lora.roles must not be empty");
            }
        }
        Ok(())
    }
}

/// One optimizer step, or a probe measurement taken after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_em: Option<f64>,
}

/// Accuracy on the recipe's own data after an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainStatus {
    /// All configured epochs ran.
    Completed,
    /// The step cap was hit first.
    MaxSteps,
    /// Pretraining reached its probe target.
    TargetReached,
    /// Negative gradient drove training accuracy to zero.
    EarlyStopped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub method: MethodId,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
    pub status: TrainStatus,
}

impl TrainLog {
    pub fn new(method: MethodId) -> Self {
        TrainLog {
            method,
            steps: Vec::new(),
            epochs: Vec::new(),
            wall_clock_secs: 0.0,
            status: TrainStatus::Completed,
        }
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// Step records as JSON lines.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step record serializes"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in MethodId::TUNING.into_iter().chain([MethodId::Pretrain]) {
            assert_eq!(m.as_str().parse::<MethodId>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("rome".parse::<MethodId>().is_err());
    }

    #[test]
    fn recipe_defaults() {
        let p = TrainRecipe::for_method(MethodId::Pretrain);
        assert_eq!((p.batch_size, p.max_steps), (32, 30_000));
        let n = TrainRecipe::for_method(MethodId::NegGrad);
        assert_eq!((n.batch_size, n.epochs), (16, 30));
        assert_eq!(TrainRecipe::for_method(MethodId::NegTaskVector).task_vector_scale, 4.0);
        assert_eq!(n.lora.roles, vec![MatrixRole::MlpIn, MatrixRole::MlpOut]);
        let mut bad = TrainRecipe::for_method(MethodId::Sanitize);
        bad.lora.rank = 0;
        assert!(bad.validate().is_err());
    }
}
