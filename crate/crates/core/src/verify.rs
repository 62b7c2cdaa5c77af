//! Finite-difference suite over the whole model on a tiny instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Graph;
use crate::data::{Instance, Kind, CHOICE_TOKENS, FIRST_FILLER, KEY_TOKENS, QUESTION_TEMPLATE};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::{
    encode_audio, encode_text, init_params, mkd_block_forward, mkd_loss, mkd_prefix, Modality, ModelConfig,
    AUDIO_FEATURE_DIM,
};
use crate::training::{multimodal_loss, multimodal_pass, LogitMseFlow};

/// Shape of the suite: model width, heads, frames `M`, tokens `N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    pub d: usize,
    pub heads: usize,
    pub frames: usize,
    pub tokens: usize,
    pub vocab: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Coordinates checked per tensor; `usize::MAX` checks all of them.
    pub samples: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            d: 8,
            heads: 2,
            frames: 3,
            tokens: 4,
            vocab: 16,
            seed: 0,
            tolerance: 1e-4,
            samples: usize::MAX,
        }
    }
}

impl SuiteConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dropout: 0.0,
            d_ff: 2 * self.d,
            ..ModelConfig::new(self.d, self.heads, self.vocab)
        }
    }
}

/// A random TEXT-kind instance with unit-variance audio frames.
pub fn tiny_instance(frames: usize, tokens: usize, vocab: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passage: Vec<usize> = (0..tokens).map(|_| rng.random_range(FIRST_FILLER..vocab)).collect();
    let label = rng.random_range(0..KEY_TOKENS.len());
    passage[rng.random_range(0..tokens)] = KEY_TOKENS[label];
    let audio = (0..frames)
        .map(|_| (0..AUDIO_FEATURE_DIM).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    Instance {
        id: 0,
        kind: Kind::Text,
        passage,
        audio,
        question: QUESTION_TEMPLATE.to_vec(),
        choices: CHOICE_TOKENS.map(|c| vec![c]),
        label,
    }
}

/// Checks the multimodal loss against every fusion-model tensor, then each
/// distillation block's loss against its own students.
pub fn model_grad_checks(cfg: &SuiteConfig) -> Result<Vec<(String, GradCheckReport)>> {
    let model = cfg.model_config();
    let inst = tiny_instance(cfg.frames, cfg.tokens, cfg.vocab, cfg.seed);
    let mut reports = Vec::new();

    let mut params = init_params(&model, cfg.seed)?;
    params.freeze_prefix("mkd.");
    let report = grad_check(
        |g, p| {
            let pass = multimodal_pass(g, p, &model, &inst)?;
            Ok(multimodal_loss(g, pass.y_a, pass.y_p, inst.label, 1.0, LogitMseFlow::Both)?.total)
        },
        &mut params,
        cfg.samples,
        cfg.tolerance,
        cfg.seed,
    )?;
    reports.push(("multimodal loss".to_string(), report));

    for modality in [Modality::Passage, Modality::Audio] {
        let mut teacher_graph = Graph::new();
        let teacher_params = init_params(&model, cfg.seed)?;
        let teacher = multimodal_pass(&mut teacher_graph, &teacher_params, &model, &inst)?
            .diia
            .materialize(&teacher_graph);
        let mut params = teacher_params.clone();
        params.freeze_all_except(&[&format!("{}.", mkd_prefix(modality))]);
        let report = grad_check(
            |g, p| {
                let encoded = match modality {
                    Modality::Audio => encode_audio(g, p, &model, &inst.audio_tensor()?)?,
                    Modality::Passage => encode_text(g, p, &model, &inst.passage)?,
                };
                let students = mkd_block_forward(g, p, modality, encoded)?;
                mkd_loss(g, &teacher, &students)
            },
            &mut params,
            cfg.samples,
            cfg.tolerance,
            cfg.seed,
        )?;
        reports.push((format!("{} distillation loss", modality.name()), report));
    }
    Ok(reports)
}
