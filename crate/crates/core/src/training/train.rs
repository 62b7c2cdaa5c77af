//! Training loops. Every run is single-threaded and a pure function of the
//! dataset, the configuration and (for distillation) the teacher.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamState;
use crate::autodiff::{Graph, Var};
use crate::data::{epoch_order, Dataset, Instance};
use crate::error::{Error, Result};
use crate::model::{init_params, mkd_block_forward, mkd_loss, mkd_prefix, DiiaOutputs, Modality, ModelConfig};
use crate::params::ParamTree;

use super::eval::{evaluate, InferMode};
use super::forward::{conventional_pass, encode_modality, multimodal_pass};
use super::loss::{multimodal_loss, LossParts};
use super::metrics::MetricsRow;
use super::{Checkpoint, SeedState, TrainConfig, TrainMode};

#[derive(Debug, Clone)]
pub struct TrainRun {
    /// Snapshot with the best dev accuracy (ties go to the lower dev loss,
    /// then to the earlier epoch).
    pub checkpoint: Checkpoint,
    /// Parameters after the last epoch.
    pub last: Checkpoint,
    /// Epoch 0 rows (before any update) followed by one train and one dev row
    /// per epoch.
    pub metrics: Vec<MetricsRow>,
}

impl TrainRun {
    pub fn rows(&self, split: &str) -> impl Iterator<Item = &MetricsRow> {
        let split = split.to_string();
        self.metrics.iter().filter(move |r| r.split == split)
    }
}

/// Dropout stream for one instance visit; independent of batch layout.
fn instance_rng(seed: u64, epoch: usize, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | idx as u64);
    rng
}

fn report_acc(row: &MetricsRow) -> f64 {
    row.accuracy.unwrap_or(0.0)
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item().expect("scalar loss")
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            msg: format!("non-finite value produced by `{op}`"),
        },
        other => other,
    }
}

/// Builds one instance's loss on the given graph.
type StepFn<'a> = dyn Fn(&mut Graph, &ParamTree, usize) -> Result<(Var, LossParts)> + 'a;

struct Loop<'a> {
    cfg: &'a TrainConfig,
    model: ModelConfig,
    train: &'a [Instance],
    dev: &'a [Instance],
    mode_name: &'static str,
    infer_mode: InferMode,
    distilled: (bool, bool),
    step: &'a StepFn<'a>,
}

impl Loop<'_> {
    fn snapshot(&self, params: &ParamTree, epoch: usize, dev_accuracy: f64, adam_steps: u64) -> Checkpoint {
        Checkpoint {
            params: params.clone(),
            train: self.cfg.clone(),
            model: self.model.clone(),
            epoch,
            dev_accuracy,
            seed_state: SeedState {
                seed: self.cfg.seed,
                epochs_completed: epoch,
                adam_steps,
            },
            distilled_text: self.distilled.0,
            distilled_audio: self.distilled.1,
        }
    }

    fn train_row(&self, epoch: usize, per_instance: &[LossParts]) -> MetricsRow {
        let mut losses = LossParts::default();
        for l in per_instance {
            losses.add(l);
        }
        MetricsRow {
            epoch,
            split: "train".into(),
            mode: self.mode_name.into(),
            losses: losses.scaled(1.0 / per_instance.len() as f64),
            accuracy: None,
        }
    }

    fn dev_row(&self, ck: &Checkpoint, epoch: usize) -> Result<(MetricsRow, f64)> {
        let report = evaluate("dev", self.dev, ck, self.infer_mode)?;
        let mut row = report.to_metrics_row(epoch);
        row.mode = self.mode_name.into();
        Ok((row, report.losses.total()))
    }

    fn run(&self, mut params: ParamTree) -> Result<TrainRun> {
        if self.train.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        if self.dev.is_empty() {
            return Err(Error::Input("dev split is empty".into()));
        }
        let mut adam = AdamState::new(self.cfg.lr);
        let mut metrics = Vec::new();

        // Epoch 0: the untouched initialization, measured without dropout.
        let mut initial = Vec::with_capacity(self.train.len());
        for idx in 0..self.train.len() {
            let mut g = Graph::new();
            let (_, parts) = (self.step)(&mut g, &params, idx).map_err(|e| diverged(0, e))?;
            initial.push(parts);
        }
        let row = self.train_row(0, &initial);
        let start = self.snapshot(&params, 0, 0.0, 0);
        let (dev, dev_loss) = self.dev_row(&start, 0).map_err(|e| diverged(0, e))?;
        let mut best = self.snapshot(&params, 0, report_acc(&dev), 0);
        let mut best_loss = dev_loss;
        metrics.push(row);
        metrics.push(dev);

        for epoch in 1..=self.cfg.epochs {
            let order = epoch_order(self.train.len(), self.cfg.seed, epoch);
            let mut seen = vec![LossParts::default(); self.train.len()];
            for batch in order.chunks(self.cfg.batch) {
                let scale = 1.0 / batch.len() as f64;
                for &idx in batch {
                    let mut g = if self.model.dropout > 0.0 {
                        Graph::training(instance_rng(self.cfg.seed, epoch, idx))
                    } else {
                        Graph::new()
                    };
                    let (loss, parts) = (self.step)(&mut g, &params, idx).map_err(|e| diverged(epoch, e))?;
                    let grads = g.backward(loss).map_err(|e| diverged(epoch, e))?;
                    params.accumulate(&g.param_grads(&grads), scale)?;
                    seen[idx] = parts;
                }
                params.ensure_grads();
                adam.step(&mut params)?;
            }
            if let Some((path, _)) = params.iter().find(|(_, t)| !t.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    msg: format!("parameter `{path}` became non-finite"),
                });
            }
            let row = self.train_row(epoch, &seen);
            let current = self.snapshot(&params, epoch, 0.0, adam.steps());
            let (dev, dev_loss) = self.dev_row(&current, epoch).map_err(|e| diverged(epoch, e))?;
            let acc = report_acc(&dev);
            let better = acc > best.dev_accuracy || (acc == best.dev_accuracy && dev_loss < best_loss);
            if better {
                best = self.snapshot(&params, epoch, acc, adam.steps());
                best_loss = dev_loss;
            }
            metrics.push(row);
            metrics.push(dev);
        }

        let dev_accuracy = metrics.last().map(report_acc).unwrap_or(0.0);
        let last = self.snapshot(&params, self.cfg.epochs, dev_accuracy, adam.steps());
        Ok(TrainRun {
            checkpoint: best,
            last,
            metrics,
        })
    }
}

/// Stage one for the mode in `cfg`: multimodal or a conventional unimodal baseline.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, vocab: usize) -> Result<TrainRun> {
    match cfg.mode {
        TrainMode::Multimodal => train_multimodal(dataset, cfg, vocab),
        TrainMode::ConventionalText => train_conventional(dataset, cfg, vocab, Modality::Passage),
        TrainMode::ConventionalAudio => train_conventional(dataset, cfg, vocab, Modality::Audio),
        TrainMode::DistillText | TrainMode::DistillAudio => Err(Error::Config(format!(
            "mode `{}` needs a teacher checkpoint; use the distillation entry point",
            cfg.mode.name()
        ))),
    }
}

/// Encoders, fusion block and predictor trained with the two-stream loss.
pub fn train_multimodal(dataset: &Dataset, cfg: &TrainConfig, vocab: usize) -> Result<TrainRun> {
    let cfg = TrainConfig {
        mode: TrainMode::Multimodal,
        ..cfg.clone()
    };
    cfg.validate()?;
    let model = cfg.model_config(vocab);
    let mut params = init_params(&model, cfg.seed)?;
    params.freeze_prefix("mkd.");

    let train = &dataset.train;
    let step = |g: &mut Graph, params: &ParamTree, idx: usize| -> Result<(Var, LossParts)> {
        let inst = &train[idx];
        let pass = multimodal_pass(g, params, &model, inst)?;
        let l = multimodal_loss(g, pass.y_a, pass.y_p, inst.label, cfg.logit_mse_weight, cfg.logit_mse_flow)?;
        let parts = LossParts {
            ce_a: Some(scalar(g, l.ce_a)),
            ce_p: Some(scalar(g, l.ce_p)),
            mse_logits: Some(scalar(g, l.mse_logits)),
            mkd: None,
        };
        Ok((l.total, parts))
    };
    Loop {
        cfg: &cfg,
        model: model.clone(),
        train,
        dev: &dataset.dev,
        mode_name: TrainMode::Multimodal.name(),
        infer_mode: InferMode::Multimodal,
        distilled: (false, false),
        step: &step,
    }
    .run(params)
}

/// Encoder and predictor on one modality, no fusion and no students. The
/// text embedding always trains because questions and choices are text.
fn train_conventional(dataset: &Dataset, cfg: &TrainConfig, vocab: usize, modality: Modality) -> Result<TrainRun> {
    let mode = match modality {
        Modality::Passage => TrainMode::ConventionalText,
        Modality::Audio => TrainMode::ConventionalAudio,
    };
    let cfg = TrainConfig { mode, ..cfg.clone() };
    cfg.validate()?;
    let model = cfg.model_config(vocab);
    let mut params = init_params(&model, cfg.seed)?;
    match modality {
        Modality::Passage => params.freeze_all_except(&["encoder.text.", "predictor."]),
        Modality::Audio => params.freeze_all_except(&["encoder.", "predictor."]),
    }

    let train = &dataset.train;
    let step = |g: &mut Graph, params: &ParamTree, idx: usize| -> Result<(Var, LossParts)> {
        let inst = &train[idx];
        let logits = conventional_pass(g, params, &model, inst, modality)?;
        let ce = g.cross_entropy(logits, inst.label)?;
        let mut parts = LossParts::default();
        match modality {
            Modality::Audio => parts.ce_a = Some(scalar(g, ce)),
            Modality::Passage => parts.ce_p = Some(scalar(g, ce)),
        }
        Ok((ce, parts))
    };
    let infer_mode = match modality {
        Modality::Passage => InferMode::Text,
        Modality::Audio => InferMode::Audio,
    };
    Loop {
        cfg: &cfg,
        model: model.clone(),
        train,
        dev: &dataset.dev,
        mode_name: mode.name(),
        infer_mode,
        distilled: (false, false),
        step: &step,
    }
    .run(params)
}

fn check_teacher(teacher: &Checkpoint, cfg: &TrainConfig) -> Result<()> {
    if !teacher.has_fusion() {
        return Err(Error::Config(format!(
            "teacher must come from multimodal training, got `{}`",
            teacher.train.mode.name()
        )));
    }
    let m = &teacher.model;
    let mismatches: Vec<String> = [
        ("d", m.d, cfg.d),
        ("heads", m.heads, cfg.heads),
        ("d_ff", m.d_ff, cfg.d_ff),
        ("depth", m.depth, cfg.depth),
        ("max_len", m.max_len, cfg.max_len),
    ]
    .iter()
    .filter(|(_, t, c)| t != c)
    .map(|(name, t, c)| format!("{name}: teacher {t}, config {c}"))
    .collect();
    if mismatches.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("teacher/config mismatch ({})", mismatches.join("; "))))
    }
}

/// Stage two: only the chosen modality's distillation block trains, against
/// targets the frozen teacher produces from both modalities.
pub fn train_mkd(dataset: &Dataset, teacher: &Checkpoint, modality: Modality, cfg: &TrainConfig) -> Result<TrainRun> {
    let mode = match modality {
        Modality::Passage => TrainMode::DistillText,
        Modality::Audio => TrainMode::DistillAudio,
    };
    let cfg = TrainConfig { mode, ..cfg.clone() };
    cfg.validate()?;
    check_teacher(teacher, &cfg)?;
    if dataset.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let model = teacher.model.clone();
    let mut params = teacher.params.clone();
    params.unfreeze_all();
    params.freeze_all_except(&[&format!("{}.", mkd_prefix(modality))]);

    let targets = dataset
        .train
        .iter()
        .map(|inst| {
            let mut g = Graph::new();
            let pass = multimodal_pass(&mut g, &teacher.params, &model, inst)?;
            Ok(pass.diia.materialize(&g))
        })
        .collect::<Result<Vec<DiiaOutputs>>>()?;

    let train = &dataset.train;
    let step = |g: &mut Graph, params: &ParamTree, idx: usize| -> Result<(Var, LossParts)> {
        let encoded = encode_modality(g, params, &model, &train[idx], modality)?;
        let students = mkd_block_forward(g, params, modality, encoded)?;
        let loss = mkd_loss(g, &targets[idx], &students)?;
        let parts = LossParts {
            mkd: Some(scalar(g, loss)),
            ..LossParts::default()
        };
        Ok((loss, parts))
    };
    let infer_mode = match modality {
        Modality::Passage => InferMode::Text,
        Modality::Audio => InferMode::Audio,
    };
    let distilled = (
        teacher.distilled_text || modality == Modality::Passage,
        teacher.distilled_audio || modality == Modality::Audio,
    );
    Loop {
        cfg: &cfg,
        model: model.clone(),
        train,
        dev: &dataset.dev,
        mode_name: mode.name(),
        infer_mode,
        distilled,
        step: &step,
    }
    .run(params)
}
