use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyModel};
use crate::losses::{joint_loss, proto_labels, Batch, ClassWeightSet, LossConfig, LossParts};
use crate::metrics::ConfusionMatrix;
use crate::{ClassId, Error, Result, UNLABELED};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// One epoch visits every training frame once.
    pub epochs: usize,
    /// Epoch at which the learning rate drops to `final_learning_rate`.
    pub decay_epoch: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    /// Dense points sampled per step, in addition to the frame's clicked points.
    pub batch_points: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Fine-tuning epochs with the distillation term, at `final_learning_rate`.
    pub distill_epochs: usize,
    pub distill_temperature: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            decay_epoch: 18,
            learning_rate: 0.05,
            final_learning_rate: 0.005,
            batch_points: 512,
            grad_clip: 5.0,
            distill_epochs: 20,
            distill_temperature: 4.0,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.final_learning_rate > 0.0
            && self.batch_points > 0
            && self.grad_clip >= 0.0
            && self.distill_temperature > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid training config: {self:?}")))
        }
    }
}

/// Learning-rate schedule of one [`fit`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub decay_epoch: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
}

impl Schedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.learning_rate
        } else {
            self.final_learning_rate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub batch_points: usize,
    pub grad_clip: f64,
    pub update_bank: bool,
    pub seed: u64,
}

/// Candidate rows of one training input with their labels.
#[derive(Debug, Clone)]
pub struct TrainFrame<'a> {
    pub features: ArrayView2<'a, f64>,
    pub sparse: Vec<ClassId>,
    /// Disjoint from `sparse`.
    pub propagated: Vec<ClassId>,
    pub weak: Vec<u32>,
    /// Rows included in every step.
    pub sparse_rows: Vec<usize>,
    /// Rows from which `batch_points` are sampled each step.
    pub dense_rows: Vec<usize>,
    /// Teacher logits per row, for distillation.
    pub teacher_logits: Option<ArrayView2<'a, f64>>,
}

impl TrainFrame<'_> {
    fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.features.nrows();
        let lens = [self.sparse.len(), self.propagated.len(), self.weak.len()];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Argument(format!("frame has {n} rows but label lengths {lens:?}")));
        }
        if self.sparse_rows.iter().chain(&self.dense_rows).any(|&r| r >= n) {
            return Err(Error::Argument(format!("frame row index out of range ({n} rows)")));
        }
        if let Some(t) = &self.teacher_logits {
            if t.dim() != (n, num_classes) {
                return Err(Error::Argument(format!(
                    "teacher logits {:?} do not correspond to {n} rows × {num_classes} classes",
                    t.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Evaluation rows with ground truth.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub features: Array2<f64>,
    pub gt: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean per-step losses.
    pub loss: LossParts,
    pub val_miou: Option<f64>,
}

/// JSON written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub format: String,
    pub mode: String,
    pub num_features: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub train: TrainConfig,
    pub losses: LossConfig,
    pub history: Vec<EpochRecord>,
}

pub fn evaluate(model: &ToyModel, set: &EvalSet) -> Result<ConfusionMatrix> {
    let pred = model.predict(set.features.view())?;
    let mut cm = ConfusionMatrix::new(model.num_classes);
    cm.accumulate(&set.gt, &pred, &[])?;
    Ok(cm)
}

fn gather<T: Copy>(v: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&r| v[r]).collect()
}

/// Mini-batch SGD on the joint loss.
///
/// Each step uses one frame: its clicked rows plus `batch_points` dense rows
/// drawn without replacement. Frames are visited in a fresh random order every
/// epoch. The prototype bank is updated after each step from the step's
/// (pre-update) embeddings when `update_bank` is set and the contrastive term is
/// active.
pub fn fit(
    model: &mut ToyModel,
    frames: &[TrainFrame],
    weights: &ClassWeightSet,
    losses: &LossConfig,
    schedule: Schedule,
    options: FitOptions,
    val: Option<&EvalSet>,
) -> Result<Vec<EpochRecord>> {
    if frames.is_empty() {
        return Err(Error::Argument("no training frames".into()));
    }
    for f in frames {
        f.validate(model.num_classes)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = schedule.rate(epoch);
        order.shuffle(&mut rng);
        let mut sum = LossParts::default();
        for &fi in &order {
            let frame = &frames[fi];
            let mut rows = frame.sparse_rows.clone();
            let k = options.batch_points.min(frame.dense_rows.len());
            rows.extend(sample(&mut rng, frame.dense_rows.len(), k).into_iter().map(|i| frame.dense_rows[i]));
            rows.sort_unstable();
            rows.dedup();
            let parts = step(model, frame, &rows, weights, losses, lr, options)?;
            sum.sparse += parts.sparse;
            sum.propagated += parts.propagated;
            sum.weak += parts.weak;
            sum.proto += parts.proto;
            sum.distill += parts.distill;
        }
        let inv = 1.0 / frames.len() as f64;
        let loss = LossParts {
            sparse: sum.sparse * inv,
            propagated: sum.propagated * inv,
            weak: sum.weak * inv,
            proto: sum.proto * inv,
            distill: sum.distill * inv,
        };
        let val_miou = val.map(|v| evaluate(model, v).map(|cm| cm.miou())).transpose()?;
        log::debug!("epoch {epoch} lr {lr} loss {:.4} val {:?}", loss.total(), val_miou);
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            loss,
            val_miou,
        });
    }
    Ok(history)
}

fn step(
    model: &mut ToyModel,
    frame: &TrainFrame,
    rows: &[usize],
    weights: &ClassWeightSet,
    losses: &LossConfig,
    lr: f64,
    options: FitOptions,
) -> Result<LossParts> {
    let x = frame.features.select(Axis(0), rows);
    let sparse = gather(&frame.sparse, rows);
    let propagated = gather(&frame.propagated, rows);
    let weak = gather(&frame.weak, rows);
    let teacher = frame.teacher_logits.map(|t| t.select(Axis(0), rows));
    let fwd = model.forward(x.view())?;
    let projection = model.projection();
    let batch = Batch {
        logits: fwd.logits.view(),
        embeddings: fwd.embedding.view(),
        sparse: &sparse,
        propagated: &propagated,
        weak: &weak,
        teacher_logits: teacher.as_ref().map(|t| t.view()),
    };
    let out = joint_loss(&batch, &model.bank, &projection, weights, losses)?;
    let total = out.parts.total();
    if !total.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {:?}", out.parts)));
    }
    let mut grads = model.backward(&fwd, out.grad_logits.view(), out.grad_embeddings.view(), out.grad_projection.view());
    let norm = grads.norm();
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("non-finite gradient at loss {total}")));
    }
    if options.grad_clip > 0.0 && norm > options.grad_clip {
        let s = options.grad_clip / norm;
        grads.arrays_mut().into_iter().for_each(|g| *g *= s);
    }
    for (p, g) in model.params.arrays_mut().into_iter().zip(grads.arrays()) {
        p.scaled_add(-lr, g);
    }
    if options.update_bank && losses.proto {
        let labels = if losses.propagated {
            proto_labels(&sparse, &propagated)
        } else {
            sparse
        };
        if labels.iter().any(|&l| l != UNLABELED) {
            let q = projection.forward(fwd.embedding.view());
            model.bank.update(q.view(), &labels)?;
        }
    }
    Ok(out.parts)
}

/// Training from the current weights with the configured two-stage rate.
pub fn train(
    model: &mut ToyModel,
    frames: &[TrainFrame],
    weights: &ClassWeightSet,
    losses: &LossConfig,
    config: &TrainConfig,
    val: Option<&EvalSet>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let schedule = Schedule {
        epochs: config.epochs,
        decay_epoch: config.decay_epoch,
        learning_rate: config.learning_rate,
        final_learning_rate: config.final_learning_rate,
    };
    let options = FitOptions {
        batch_points: config.batch_points,
        grad_clip: config.grad_clip,
        update_bank: true,
        seed: config.seed,
    };
    fit(model, frames, weights, losses, schedule, options, val)
}

/// Fine-tunes a student with the distillation term added, at the final
/// learning rate and with the prototype bank frozen. Every frame must carry
/// teacher logits.
pub fn distill(
    student: &mut ToyModel,
    frames: &[TrainFrame],
    weights: &ClassWeightSet,
    losses: &LossConfig,
    config: &TrainConfig,
    val: Option<&EvalSet>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if let Some(i) = frames.iter().position(|f| f.teacher_logits.is_none()) {
        return Err(Error::Argument(format!("frame {i} has no teacher logits")));
    }
    let losses = LossConfig {
        distill_temperature: Some(config.distill_temperature),
        ..losses.clone()
    };
    let schedule = Schedule {
        epochs: config.distill_epochs,
        decay_epoch: 0,
        learning_rate: config.final_learning_rate,
        final_learning_rate: config.final_learning_rate,
    };
    let options = FitOptions {
        batch_points: config.batch_points,
        grad_clip: config.grad_clip,
        update_bank: false,
        seed: crate::stream_seed(config.seed, 7),
    };
    fit(student, frames, weights, &losses, schedule, options, val)
}
