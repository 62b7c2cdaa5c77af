//! Run configuration file: a TOML document with optional `[train]` and
//! `[data]` tables whose keys mirror [`TrainConfig`] and [`GenConfig`].
//! Unknown keys are rejected; absent keys keep their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::training::{LogitMseFlow, StudentInput, TrainConfig, TrainMode};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOverrides {
    pub d: Option<usize>,
    pub heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub dropout: Option<f64>,
    pub max_len: Option<usize>,
    pub depth: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub mode: Option<TrainMode>,
    pub student_input: Option<StudentInput>,
    pub logit_mse_weight: Option<f64>,
    pub logit_mse_flow: Option<LogitMseFlow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenOverrides {
    pub seed: Option<u64>,
    pub train: Option<usize>,
    pub dev: Option<usize>,
    pub test: Option<usize>,
    pub rho: Option<f64>,
    pub vocab: Option<usize>,
    pub passage_len_min: Option<usize>,
    pub passage_len_max: Option<usize>,
    pub frames_min: Option<usize>,
    pub frames_max: Option<usize>,
    pub noise_std: Option<f64>,
    pub tone_magnitude: Option<f64>,
}

macro_rules! overlay {
    ($src:expr, $dst:expr, $($field:ident),+) => {
        $(if let Some(v) = $src.$field.clone() { $dst.$field = v; })+
    };
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        overlay!(self, cfg, d, heads, d_ff, dropout, max_len, depth, batch, lr, epochs, seed, mode, student_input, logit_mse_weight, logit_mse_flow);
    }
}

impl GenOverrides {
    pub fn apply(&self, cfg: &mut GenConfig) {
        overlay!(self, cfg, seed, train, dev, test, rho, vocab, passage_len_min, passage_len_max, frames_min, frames_max, noise_std, tone_magnitude);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub train: TrainOverrides,
    pub data: GenOverrides,
}

impl RunConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        self.train.apply(&mut cfg);
        cfg
    }

    pub fn gen_config(&self) -> GenConfig {
        let mut cfg = GenConfig::default();
        self.data.apply(&mut cfg);
        cfg
    }
}

#[derive(Serialize)]
struct Effective<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<&'a GenConfig>,
}

/// TOML rendering of the configuration a run actually uses; feeding it back
/// through [`RunConfigFile::parse`] reproduces the same values.
pub fn effective_toml(train: Option<&TrainConfig>, data: Option<&GenConfig>) -> String {
    toml::to_string(&Effective { train, data }).expect("configs serialize")
}
