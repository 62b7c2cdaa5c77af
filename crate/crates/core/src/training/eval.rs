//! Inference in the three modes, split evaluation and the averaging ensemble.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{Instance, Kind};
use crate::error::{Error, Result};
use crate::model::{mkd_loss, Logits, LogitSource, Modality};

use super::forward::{conventional_pass, multimodal_pass, student_pass};
use super::loss::{multimodal_loss, LossParts};
use super::metrics::MetricsRow;
use super::{Checkpoint, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferMode {
    Multimodal,
    Text,
    Audio,
}

impl InferMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multimodal" => Ok(InferMode::Multimodal),
            "text" => Ok(InferMode::Text),
            "audio" => Ok(InferMode::Audio),
            other => Err(Error::Config(format!("unknown inference mode `{other}` (multimodal|text|audio)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InferMode::Multimodal => "multimodal",
            InferMode::Text => "text",
            InferMode::Audio => "audio",
        }
    }

    fn modality(self) -> Option<Modality> {
        match self {
            InferMode::Multimodal => None,
            InferMode::Text => Some(Modality::Passage),
            InferMode::Audio => Some(Modality::Audio),
        }
    }
}

fn logits_of(g: &Graph, v: Var, source: LogitSource) -> Result<Logits> {
    Logits::from_slice(g.value(v).data(), source)
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item().expect("scalar loss")
}

fn source_of(modality: Modality) -> LogitSource {
    match modality {
        Modality::Audio => LogitSource::Audio,
        Modality::Passage => LogitSource::Passage,
    }
}

pub(crate) struct Prediction {
    pub answer: usize,
    pub logits: Logits,
    pub losses: LossParts,
}

/// Runs one instance in evaluation mode. With `with_losses` the loss
/// components for the mode are computed too (distillation modes then also run
/// the teacher to score the students).
pub(crate) fn predict(inst: &Instance, ck: &Checkpoint, mode: InferMode, with_losses: bool) -> Result<Prediction> {
    let (params, cfg) = (&ck.params, &ck.model);
    let mut g = Graph::new();
    match mode.modality() {
        None => {
            if !ck.has_fusion() {
                return Err(Error::Config(format!(
                    "multimodal inference needs a fusion-trained checkpoint, got `{}`",
                    ck.train.mode.name()
                )));
            }
            let pass = multimodal_pass(&mut g, params, cfg, inst)?;
            let y_a = logits_of(&g, pass.y_a, LogitSource::Audio)?;
            let y_p = logits_of(&g, pass.y_p, LogitSource::Passage)?;
            let logits = y_a.sum(&y_p);
            let mut losses = LossParts::default();
            if with_losses {
                let l = multimodal_loss(
                    &mut g,
                    pass.y_a,
                    pass.y_p,
                    inst.label,
                    ck.train.logit_mse_weight,
                    ck.train.logit_mse_flow,
                )?;
                losses.ce_a = Some(scalar(&g, l.ce_a));
                losses.ce_p = Some(scalar(&g, l.ce_p));
                losses.mse_logits = Some(scalar(&g, l.mse_logits));
            }
            Ok(Prediction {
                answer: logits.argmax(),
                logits,
                losses,
            })
        }
        Some(modality) => {
            let conventional = ck.train.mode.modality() == Some(modality)
                && matches!(ck.train.mode, TrainMode::ConventionalText | TrainMode::ConventionalAudio);
            let (logits_var, students) = if conventional {
                (conventional_pass(&mut g, params, cfg, inst, modality)?, None)
            } else if ck.has_fusion() && ck.is_distilled(modality) {
                let s = student_pass(&mut g, params, cfg, inst, modality, ck.train.student_input)?;
                (s.logits, Some(s.students))
            } else {
                return Err(Error::Config(format!(
                    "{} inference needs a conventional-{} checkpoint or a trained {} distillation block (checkpoint mode `{}`)",
                    mode.name(),
                    mode.name(),
                    modality.name(),
                    ck.train.mode.name()
                )));
            };
            let logits = logits_of(&g, logits_var, source_of(modality))?;
            let mut losses = LossParts::default();
            if with_losses {
                let ce = g.cross_entropy(logits_var, inst.label)?;
                let ce = Some(scalar(&g, ce));
                match modality {
                    Modality::Audio => losses.ce_a = ce,
                    Modality::Passage => losses.ce_p = ce,
                }
                if let Some(students) = students {
                    let mut tg = Graph::new();
                    let teacher = multimodal_pass(&mut tg, params, cfg, inst)?.diia.materialize(&tg);
                    let l = mkd_loss(&mut g, &teacher, &students)?;
                    losses.mkd = Some(scalar(&g, l));
                }
            }
            Ok(Prediction {
                answer: logits.argmax(),
                logits,
                losses,
            })
        }
    }
}

/// Answers one instance. Multimodal mode returns `y_A + y_P`; the unimodal
/// modes return the single stream. Ties go to the lowest index.
pub fn infer(inst: &Instance, ck: &Checkpoint, mode: InferMode) -> Result<(usize, Logits)> {
    let p = predict(inst, ck, mode, false)?;
    Ok((p.answer, p.logits))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KindAccuracy {
    pub kind: Kind,
    pub correct: usize,
    pub total: usize,
}

impl KindAccuracy {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub mode: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    pub per_kind: Vec<KindAccuracy>,
    #[serde(skip)]
    pub losses: LossParts,
}

impl EvalReport {
    fn build(split: &str, mode: &str, outcomes: &[(Kind, bool)], losses: LossParts) -> Self {
        let total = outcomes.len();
        let correct = outcomes.iter().filter(|(_, ok)| *ok).count();
        let per_kind = [Kind::Text, Kind::Tone]
            .into_iter()
            .map(|kind| {
                let of_kind: Vec<bool> = outcomes.iter().filter(|(k, _)| *k == kind).map(|(_, ok)| *ok).collect();
                KindAccuracy {
                    kind,
                    correct: of_kind.iter().filter(|ok| **ok).count(),
                    total: of_kind.len(),
                }
            })
            .collect();
        Self {
            split: split.to_string(),
            mode: mode.to_string(),
            correct,
            total,
            accuracy: correct as f64 / total as f64,
            per_kind,
            losses,
        }
    }

    pub fn kind(&self, kind: Kind) -> Option<&KindAccuracy> {
        self.per_kind.iter().find(|k| k.kind == kind)
    }

    pub fn to_metrics_row(&self, epoch: usize) -> MetricsRow {
        MetricsRow {
            epoch,
            split: self.split.clone(),
            mode: self.mode.clone(),
            losses: self.losses,
            accuracy: Some(self.accuracy),
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "split={} mode={} accuracy={:.4} ({}/{})",
            self.split, self.mode, self.accuracy, self.correct, self.total
        )?;
        for k in &self.per_kind {
            write!(f, " {}={:.4} ({}/{})", k.kind.name(), k.accuracy(), k.correct, k.total)?;
        }
        let parts = [
            ("ce_a", self.losses.ce_a),
            ("ce_p", self.losses.ce_p),
            ("mse_logits", self.losses.mse_logits),
            ("mkd", self.losses.mkd),
        ];
        for (name, v) in parts {
            if let Some(v) = v {
                write!(f, " {name}={v:.6}")?;
            }
        }
        Ok(())
    }
}

/// Accuracy overall and per kind, plus mean loss components.
pub fn evaluate(split: &str, instances: &[Instance], ck: &Checkpoint, mode: InferMode) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Input(format!("split `{split}` is empty")));
    }
    let mut outcomes = Vec::with_capacity(instances.len());
    let mut losses = LossParts::default();
    for inst in instances {
        let p = predict(inst, ck, mode, true)?;
        outcomes.push((inst.kind, p.answer == inst.label));
        losses.add(&p.losses);
    }
    let losses = losses.scaled(1.0 / instances.len() as f64);
    Ok(EvalReport::build(split, mode.name(), &outcomes, losses))
}

/// Argmax of the mean of the two softmax-normalized unimodal predictions.
pub fn ensemble_answer(inst: &Instance, text: &Checkpoint, audio: &Checkpoint) -> Result<usize> {
    let (_, lt) = infer(inst, text, InferMode::Text)?;
    let (_, la) = infer(inst, audio, InferMode::Audio)?;
    let (pt, pa) = (lt.softmax(), la.softmax());
    let mean: Vec<f64> = pt.iter().zip(pa).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(Logits::from_slice(&mean, LogitSource::Combined)?.argmax())
}

pub fn ensemble_evaluate(split: &str, instances: &[Instance], text: &Checkpoint, audio: &Checkpoint) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Input(format!("split `{split}` is empty")));
    }
    let outcomes = instances
        .iter()
        .map(|inst| Ok((inst.kind, ensemble_answer(inst, text, audio)? == inst.label)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::build(split, "ensemble", &outcomes, LossParts::default()))
}
