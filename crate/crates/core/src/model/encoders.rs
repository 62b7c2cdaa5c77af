//! Token embedding lookup and the linear audio projection.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

use super::{ModelConfig, AUDIO_BIAS, AUDIO_WEIGHT, TEXT_EMBEDDING};

/// Width of one raw audio frame.
pub const AUDIO_FEATURE_DIM: usize = 128;

/// Embeds a token sequence into an `N×d` matrix. Used for passages,
/// questions and choices alike.
pub fn encode_text(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, tokens: &[usize]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::Input(format!(
            "token sequence of length {} exceeds max_len {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::Input(format!("token id {bad} out of vocabulary ({})", cfg.vocab)));
    }
    let table = g.param(params, TEXT_EMBEDDING)?;
    g.gather_rows(table, tokens)
}

/// Projects `M×128` frames to `M×d`.
pub fn encode_audio(g: &mut Graph, params: &ParamTree, cfg: &ModelConfig, frames: &Tensor) -> Result<Var> {
    let (m, width) = frames
        .dims2()
        .ok_or_else(|| Error::Input(format!("audio frames must be a matrix, got {:?}", frames.shape())))?;
    if width != AUDIO_FEATURE_DIM {
        return Err(Error::Input(format!(
            "audio frame width {width}, expected {AUDIO_FEATURE_DIM}"
        )));
    }
    if m > cfg.max_len {
        return Err(Error::Input(format!("{m} audio frames exceed max_len {}", cfg.max_len)));
    }
    let x = g.constant(frames.clone())?;
    let w = g.param(params, AUDIO_WEIGHT)?;
    let b = g.param(params, AUDIO_BIAS)?;
    let h = g.matmul(x, w)?;
    g.add_row(h, b)
}
