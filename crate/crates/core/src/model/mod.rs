//! Model definition: encoders, the inter/intra-modality fusion block, the
//! answer predictor and the distillation students.
//!
//! All parameters live in a single [`ParamTree`]; the functions here only
//! record computation on a [`Graph`](crate::autodiff::Graph).

pub mod diia;
pub mod encoders;
pub mod mkd;
pub mod predictor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub use diia::{diia_forward, DiiaOutputs, DiiaVars};
pub use encoders::{encode_audio, encode_text, AUDIO_FEATURE_DIM};
pub use mkd::{mkd_block_forward, mkd_loss, MkdVars};
pub use predictor::{predictor_forward, LogitSource, Logits, PredictorVars, NUM_CHOICES};

/// Which input stream a representation or a set of logits came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Passage,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Passage => "passage",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab: usize,
    pub max_len: usize,
    /// Number of stacked fusion blocks.
    pub depth: usize,
    pub mkd_hidden: usize,
}

impl ModelConfig {
    pub fn new(d: usize, heads: usize, vocab: usize) -> Self {
        Self {
            d,
            heads,
            d_ff: 4 * d,
            dropout: 0.1,
            vocab,
            max_len: 384,
            depth: 1,
            mkd_hidden: 2 * d,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 {
            return Err(Error::Config("d and heads must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d_ff == 0 || self.mkd_hidden == 0 || self.vocab == 0 || self.max_len == 0 || self.depth == 0 {
            return Err(Error::Config("d_ff, mkd_hidden, vocab, max_len and depth must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal with std `1/sqrt(rows)`: unit-variance outputs for unit-variance inputs.
    fn projection(&mut self, rows: usize, cols: usize) -> Tensor {
        let normal = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
        let data = (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect();
        Tensor::new(vec![rows, cols], data).expect("positive extents")
    }

    fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Tensor {
        let u = Uniform::new(-bound, bound).expect("non-empty range");
        let data = (0..rows * cols).map(|_| u.sample(&mut self.rng)).collect();
        Tensor::new(vec![rows, cols], data).expect("positive extents")
    }
}

/// Paths of one feed-forward network `relu(x W_in + b_in) W_out + b_out`.
pub(crate) fn insert_mlp(tree: &mut ParamTree, init: &mut Init, prefix: &str, d: usize, hidden: usize) -> Result<()> {
    tree.insert(format!("{prefix}.w_in"), init.projection(d, hidden))?;
    tree.insert(format!("{prefix}.b_in"), Tensor::zeros(vec![hidden]))?;
    tree.insert(format!("{prefix}.w_out"), init.projection(hidden, d))?;
    tree.insert(format!("{prefix}.b_out"), Tensor::zeros(vec![d]))?;
    Ok(())
}

pub(crate) fn insert_norm(tree: &mut ParamTree, prefix: &str, d: usize) -> Result<()> {
    tree.insert(format!("{prefix}.gain"), Tensor::filled(vec![d], 1.0))?;
    tree.insert(format!("{prefix}.bias"), Tensor::zeros(vec![d]))?;
    Ok(())
}

pub const TEXT_EMBEDDING: &str = "encoder.text.embedding";
pub const AUDIO_WEIGHT: &str = "encoder.audio.weight";
pub const AUDIO_BIAS: &str = "encoder.audio.bias";
pub const PREDICTOR_POOL: &str = "predictor.pool";
pub const PREDICTOR_BILINEAR: &str = "predictor.bilinear";

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DIIA_PREFIX: &str = "diia.";
pub const PREDICTOR_PREFIX: &str = "predictor.";

pub fn mkd_prefix(modality: Modality) -> String {
    format!("mkd.{}", modality.name())
}

/// Builds the full parameter tree: encoders, `depth` fusion blocks, the
/// predictor and both distillation blocks.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamTree> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut tree = ParamTree::new();
    let d = cfg.d;

    tree.insert(TEXT_EMBEDDING, init.uniform(cfg.vocab, d, 0.1))?;
    tree.insert(AUDIO_WEIGHT, init.projection(AUDIO_FEATURE_DIM, d))?;
    tree.insert(AUDIO_BIAS, Tensor::zeros(vec![d]))?;

    for block in 0..cfg.depth {
        diia::insert_block_params(&mut tree, &mut init, cfg, block)?;
    }

    tree.insert(PREDICTOR_POOL, init.projection(d, d))?;
    tree.insert(PREDICTOR_BILINEAR, init.projection(d, d))?;

    for modality in [Modality::Audio, Modality::Passage] {
        let prefix = mkd_prefix(modality);
        insert_mlp(&mut tree, &mut init, &format!("{prefix}.mlp1"), d, cfg.mkd_hidden)?;
        insert_mlp(&mut tree, &mut init, &format!("{prefix}.mlp2"), d, cfg.mkd_hidden)?;
    }
    Ok(tree)
}
