use crate::autodiff::{Graph, Var};
use crate::error::Result;

use super::LogitMseFlow;

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ce_a: Var,
    pub ce_p: Var,
    pub mse_logits: Var,
}

/// Scalar loss components read back from a graph. `None` means the
/// component does not apply to the run's mode.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub ce_a: Option<f64>,
    pub ce_p: Option<f64>,
    pub mse_logits: Option<f64>,
    pub mkd: Option<f64>,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        [self.ce_a, self.ce_p, self.mse_logits, self.mkd].iter().flatten().sum()
    }

    pub(crate) fn add(&mut self, other: &LossParts) {
        fn acc(a: &mut Option<f64>, b: Option<f64>) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b);
            }
        }
        acc(&mut self.ce_a, other.ce_a);
        acc(&mut self.ce_p, other.ce_p);
        acc(&mut self.mse_logits, other.mse_logits);
        acc(&mut self.mkd, other.mkd);
    }

    pub(crate) fn scaled(&self, s: f64) -> LossParts {
        LossParts {
            ce_a: self.ce_a.map(|v| v * s),
            ce_p: self.ce_p.map(|v| v * s),
            mse_logits: self.mse_logits.map(|v| v * s),
            mkd: self.mkd.map(|v| v * s),
        }
    }
}

fn detached(g: &mut Graph, v: Var) -> Result<Var> {
    let value = g.value(v).clone();
    g.constant(value)
}

/// `CE(y_A, label) + CE(y_P, label) + weight · MSE(y_A, y_P)`.
pub fn multimodal_loss(
    g: &mut Graph,
    y_a: Var,
    y_p: Var,
    label: usize,
    mse_weight: f64,
    flow: LogitMseFlow,
) -> Result<LossVars> {
    let ce_a = g.cross_entropy(y_a, label)?;
    let ce_p = g.cross_entropy(y_p, label)?;
    let (a, p) = match flow {
        LogitMseFlow::Both => (y_a, y_p),
        LogitMseFlow::Audio => (y_a, detached(g, y_p)?),
        LogitMseFlow::Passage => (detached(g, y_a)?, y_p),
    };
    let mse_logits = g.mse(a, p)?;
    let ce = g.add(ce_a, ce_p)?;
    let weighted = g.scale(mse_logits, mse_weight)?;
    let total = g.add(ce, weighted)?;
    Ok(LossVars {
        total,
        ce_a,
        ce_p,
        mse_logits,
    })
}
