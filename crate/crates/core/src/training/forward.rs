//! Per-instance forward passes for each way the model can be run.

use crate::autodiff::{Graph, Var};
use crate::data::Instance;
use crate::error::Result;
use crate::model::{
    diia_forward, encode_audio, encode_text, mkd_block_forward, predictor_forward, DiiaVars, MkdVars, Modality,
    ModelConfig,
};
use crate::params::ParamTree;

use super::StudentInput;

pub fn encode_question_choices(
    g: &mut Graph,
    params: &ParamTree,
    cfg: &ModelConfig,
    inst: &Instance,
) -> Result<(Var, [Var; 4])> {
    let question = encode_text(g, params, cfg, &inst.question)?;
    let mut choices = [question; 4];
    for (slot, tokens) in choices.iter_mut().zip(&inst.choices) {
        *slot = encode_text(g, params, cfg, tokens)?;
    }
    Ok((question, choices))
}

pub(crate) fn encode_modality(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, inst: &Instance, modality: Modality) -> Result<Var> {
    match modality {
        Modality::Audio => encode_audio(g, params, cfg, &inst.audio_tensor()?),
        Modality::Passage => encode_text(g, params, cfg, &inst.passage),
    }
}

#[derive(Debug, Clone)]
pub struct MultimodalPass {
    pub audio: Var,
    pub passage: Var,
    pub diia: DiiaVars,
    /// Predictor applied to `A_intra`.
    pub y_a: Var,
    /// Predictor applied to `P_intra`.
    pub y_p: Var,
}

/// Encoders, fusion block, then the shared predictor on each intra stream.
pub fn multimodal_pass(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, inst: &Instance) -> Result<MultimodalPass> {
    let audio = encode_audio(g, params, cfg, &inst.audio_tensor()?)?;
    let passage = encode_text(g, params, cfg, &inst.passage)?;
    let (question, choices) = encode_question_choices(g, params, cfg, inst)?;
    let diia = diia_forward(g, params, cfg, audio, passage)?;
    let y_a = predictor_forward(g, params, diia.a_intra(), question, &choices)?.logits;
    let y_p = predictor_forward(g, params, diia.p_intra(), question, &choices)?.logits;
    Ok(MultimodalPass {
        audio,
        passage,
        diia,
        y_a,
        y_p,
    })
}

/// Encoder straight into the predictor, no fusion and no students.
pub fn conventional_pass(
    g: &mut Graph,
    params: &ParamTree,
    cfg: &ModelConfig,
    inst: &Instance,
    modality: Modality,
) -> Result<Var> {
    let encoded = encode_modality(g, params, cfg, inst, modality)?;
    let (question, choices) = encode_question_choices(g, params, cfg, inst)?;
    Ok(predictor_forward(g, params, encoded, question, &choices)?.logits)
}

#[derive(Debug, Clone, Copy)]
pub struct StudentPass {
    pub students: MkdVars,
    pub logits: Var,
}

/// Single-modality encoder, distillation block, then the predictor on the
/// selected student stage.
pub fn student_pass(
    g: &mut Graph,
    params: &ParamTree,
    cfg: &ModelConfig,
    inst: &Instance,
    modality: Modality,
    input: StudentInput,
) -> Result<StudentPass> {
    let encoded = encode_modality(g, params, cfg, inst, modality)?;
    let students = mkd_block_forward(g, params, modality, encoded)?;
    let fused = match input {
        StudentInput::Intra => students.intra,
        StudentInput::Inter => students.inter,
    };
    let (question, choices) = encode_question_choices(g, params, cfg, inst)?;
    let logits = predictor_forward(g, params, fused, question, &choices)?.logits;
    Ok(StudentPass { students, logits })
}
