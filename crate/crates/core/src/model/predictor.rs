//! Minimal answer predictor shared by the audio-side and passage-side streams.
//!
//! `q = mean(question) W_pool`, `c = softmax(fused q^T)^T fused`,
//! `score_i = c W_bilinear mean(choice_i)^T`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamTree;

use super::{PREDICTOR_BILINEAR, PREDICTOR_POOL};

pub const NUM_CHOICES: usize = 4;

/// Where a set of scores came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogitSource {
    Audio,
    Passage,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Logits {
    pub scores: [f64; NUM_CHOICES],
    pub source: LogitSource,
}

impl Logits {
    pub fn from_slice(values: &[f64], source: LogitSource) -> Result<Self> {
        let scores: [f64; NUM_CHOICES] = values
            .try_into()
            .map_err(|_| Error::Input(format!("expected {NUM_CHOICES} logits, got {}", values.len())))?;
        Ok(Self { scores, source })
    }

    /// Index of the largest score; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..NUM_CHOICES {
            if self.scores[i] > self.scores[best] {
                best = i;
            }
        }
        best
    }

    pub fn sum(&self, other: &Logits) -> Logits {
        let mut scores = self.scores;
        scores.iter_mut().zip(other.scores).for_each(|(a, b)| *a += b);
        Logits {
            scores,
            source: LogitSource::Combined,
        }
    }

    pub fn softmax(&self) -> [f64; NUM_CHOICES] {
        let p = crate::autodiff::softmax(&self.scores);
        p.try_into().expect("length preserved")
    }
}

#[derive(Debug, Clone)]
pub struct PredictorVars {
    /// `1×4` raw scores.
    pub logits: Var,
    /// `1×L` attention-pooling weights over the rows of the fused input.
    pub pool_weights: Var,
}

pub fn predictor_forward(
    g: &mut Graph,
    params: &ParamTree,
    fused: Var,
    question: Var,
    choices: &[Var; NUM_CHOICES],
) -> Result<PredictorVars> {
    let d = g.value(fused).cols();
    for &v in std::iter::once(&question).chain(choices) {
        if g.value(v).cols() != d {
            return Err(Error::Shape {
                op: "predictor",
                lhs: g.value(fused).shape().to_vec(),
                rhs: g.value(v).shape().to_vec(),
            });
        }
    }
    let w_pool = g.param(params, PREDICTOR_POOL)?;
    let w_bil = g.param(params, PREDICTOR_BILINEAR)?;

    let q_mean = g.mean_rows(question)?;
    let q = g.matmul(q_mean, w_pool)?;
    let qt = g.transpose(q)?;
    let scores = g.matmul(fused, qt)?;
    let scores = g.transpose(scores)?;
    let pool_weights = g.softmax_rows(scores)?;
    let context = g.matmul(pool_weights, fused)?;
    let projected = g.matmul(context, w_bil)?;

    let mut per_choice = Vec::with_capacity(NUM_CHOICES);
    for &c in choices {
        let m = g.mean_rows(c)?;
        let mt = g.transpose(m)?;
        per_choice.push(g.matmul(projected, mt)?);
    }
    let logits = g.concat_cols(&per_choice)?;
    Ok(PredictorVars { logits, pool_weights })
}
