//! Stage-one (multimodal or conventional unimodal) training, stage-two
//! distillation, inference, evaluation and the averaging ensemble.

mod checkpoint;
mod eval;
mod forward;
mod loss;
mod metrics;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Modality, ModelConfig};

pub use checkpoint::{Checkpoint, SeedState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{ensemble_answer, ensemble_evaluate, evaluate, infer, EvalReport, InferMode, KindAccuracy};
pub use forward::{conventional_pass, encode_question_choices, multimodal_pass, student_pass, MultimodalPass, StudentPass};
pub use loss::{multimodal_loss, LossParts, LossVars};
pub use metrics::{append_metrics, write_metrics, MetricsRow, METRICS_HEADER};
pub use train::{train, train_mkd, train_multimodal, TrainRun};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Multimodal,
    DistillText,
    DistillAudio,
    ConventionalText,
    ConventionalAudio,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Multimodal => "multimodal",
            TrainMode::DistillText => "distill-text",
            TrainMode::DistillAudio => "distill-audio",
            TrainMode::ConventionalText => "conventional-text",
            TrainMode::ConventionalAudio => "conventional-audio",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multimodal" => Ok(TrainMode::Multimodal),
            "distill-text" => Ok(TrainMode::DistillText),
            "distill-audio" => Ok(TrainMode::DistillAudio),
            "conventional-text" => Ok(TrainMode::ConventionalText),
            "conventional-audio" => Ok(TrainMode::ConventionalAudio),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }

    /// The single modality a unimodal mode works on.
    pub fn modality(self) -> Option<Modality> {
        match self {
            TrainMode::Multimodal => None,
            TrainMode::DistillText | TrainMode::ConventionalText => Some(Modality::Passage),
            TrainMode::DistillAudio | TrainMode::ConventionalAudio => Some(Modality::Audio),
        }
    }
}

/// What the frozen predictor receives from a distillation block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentInput {
    Intra,
    Inter,
}

/// Which logit streams receive gradient from the `MSE(y_A, y_P)` term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitMseFlow {
    Both,
    Audio,
    Passage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub depth: usize,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub student_input: StudentInput,
    pub logit_mse_weight: f64,
    pub logit_mse_flow: LogitMseFlow,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            d_ff: 128,
            dropout: 0.1,
            max_len: 384,
            depth: 1,
            batch: 12,
            lr: 0.001,
            epochs: 100,
            seed: 0,
            mode: TrainMode::Multimodal,
            student_input: StudentInput::Intra,
            logit_mse_weight: 1.0,
            logit_mse_flow: LogitMseFlow::Both,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            d: self.d,
            heads: self.heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            vocab,
            max_len: self.max_len,
            depth: self.depth,
            mkd_hidden: 2 * self.d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.logit_mse_weight >= 0.0 && self.logit_mse_weight.is_finite()) {
            return Err(Error::Config("logit_mse_weight must be finite and non-negative".into()));
        }
        self.model_config(1).validate()
    }
}
