//! The per-round continual-learning procedure.
//!
//! Each round appends a task: a fresh adapter set and head are trained on the new
//! classes (with rehearsal exemplars as `others`), the memory is re-balanced, and
//! all heads are fine-tuned together on a class-balanced set with every adapter
//! and the backbone frozen.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterSet};
use crate::backbone::Backbone;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::heads::{select_prediction, HeadOutput, Prediction, TaskHead};
use crate::ids::{ClassId, TaskId};
use crate::layers::Linear;
use crate::memory::{build_finetune_set, RehearsalMemory};
use crate::metrics::{mean_class_recall, McrReport};
use crate::ops;
use crate::optim::{zero_grad, Optimizer, OptimizerConfig};
use crate::rng::{self, Rng};
use crate::tensor::{checksum, Checksum, Parameter, Tensor};

/// Which components take part in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    /// One head per task; when off, a single head over concatenated task features.
    pub task_specific_heads: bool,
    pub adapters: bool,
    pub others_neuron: bool,
    pub finetune: bool,
}

impl Toggles {
    pub const FULL: Toggles = Toggles {
        task_specific_heads: true,
        adapters: true,
        others_neuron: true,
        finetune: true,
    };

    /// The ablation ladder: heads only, + adapters, + others, + fine-tuning, and the
    /// unified-head variant.
    pub fn ablation_ladder() -> [(&'static str, Toggles); 5] {
        let t = |task_specific_heads, adapters, others_neuron, finetune| Toggles {
            task_specific_heads,
            adapters,
            others_neuron,
            finetune,
        };
        [
            ("tsh", t(true, false, false, false)),
            ("tsh+adapter", t(true, true, false, false)),
            ("tsh+adapter+others", t(true, true, true, false)),
            ("full", t(true, true, true, true)),
            ("unified+adapter+finetune", t(false, true, false, true)),
        ]
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        parts.push(if self.task_specific_heads { "tsh" } else { "unified" });
        if self.adapters {
            parts.push("adapter");
        }
        if self.others_neuron {
            parts.push("others");
        }
        if self.finetune {
            parts.push("finetune");
        }
        parts.join("+")
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn validate(&self, what: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(alloc::format!("{what}.batch_size must be positive")));
        }
        self.optimizer
            .validate()
            .map_err(|e| Error::Config(alloc::format!("{what}.optimizer: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub adapter_training: TrainConfig,
    pub finetune: TrainConfig,
    #[serde(default)]
    pub toggles: Toggles,
    #[serde(default)]
    pub adapter: AdapterConfig,
}

impl RoundConfig {
    /// SGD(0.01, momentum 0.9, wd 5e-4, batch 32) for 60 epochs with ×0.1 decays at
    /// 21/30/39, then Adam(0.001) for 30 epochs with decays at 16/24.
    pub fn desk() -> Self {
        Self::with_epochs(60, &[21, 30, 39], 30, &[16, 24])
    }

    /// 200 adapter epochs (decay at 70/100/130) and 100 fine-tune epochs (decay at 55/80).
    pub fn full_schedule() -> Self {
        Self::with_epochs(200, &[70, 100, 130], 100, &[55, 80])
    }

    pub fn with_epochs(adapter_epochs: usize, adapter_decay: &[usize], finetune_epochs: usize, finetune_decay: &[usize]) -> Self {
        Self {
            adapter_training: TrainConfig {
                epochs: adapter_epochs,
                batch_size: 32,
                optimizer: OptimizerConfig::sgd(0.01, 0.9, 5e-4).with_decay_at(adapter_decay, 0.1),
            },
            finetune: TrainConfig {
                epochs: finetune_epochs,
                batch_size: 32,
                optimizer: OptimizerConfig::adam(0.001, 0.0).with_decay_at(finetune_decay, 0.1),
            },
            toggles: Toggles::FULL,
            adapter: AdapterConfig::default(),
        }
    }

    pub fn validate(&self, gaps: usize) -> Result<()> {
        self.adapter_training.validate("adapter_training")?;
        self.finetune.validate("finetune")?;
        self.adapter.validate(gaps)
    }
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Everything learned in one round. The adapter set is frozen once the round's
/// own training ends; the head stays trainable for later fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub adapters: AdapterSet,
    pub head: TaskHead,
    adapter_checksum: Checksum,
}

impl TaskRecord {
    pub fn new(mut adapters: AdapterSet, head: TaskHead) -> Self {
        adapters.freeze();
        let adapter_checksum = checksum(adapters.params());
        Self {
            adapters,
            head,
            adapter_checksum,
        }
    }

    pub fn task(&self) -> TaskId {
        self.head.task()
    }

    pub fn classes(&self) -> &[ClassId] {
        self.head.classes()
    }

    pub fn adapter_checksum(&self) -> Checksum {
        self.adapter_checksum
    }
}

/// Single classifier over the concatenated features of every task.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedHead {
    pub classes: Vec<ClassId>,
    pub linear: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinualModel {
    backbone: Backbone,
    backbone_checksum: Checksum,
    records: Vec<TaskRecord>,
    pub memory: RehearsalMemory,
    pub unified_head: Option<UnifiedHead>,
}

/// Inference batch size.
const EVAL_BATCH: usize = 64;

impl ContinualModel {
    /// Wraps a pretrained backbone, freezing it.
    pub fn new(mut backbone: Backbone, memory: RehearsalMemory) -> Self {
        backbone.freeze();
        let backbone_checksum = backbone.checksum();
        Self {
            backbone,
            backbone_checksum,
            records: Vec::new(),
            memory,
            unified_head: None,
        }
    }

    pub fn from_parts(backbone: Backbone, records: Vec<TaskRecord>, memory: RehearsalMemory, unified_head: Option<UnifiedHead>) -> Result<Self> {
        let mut model = Self::new(backbone, memory);
        for r in records {
            model.push_record(r)?;
        }
        model.unified_head = unified_head;
        Ok(model)
    }

    fn push_record(&mut self, record: TaskRecord) -> Result<()> {
        let learned = self.learned_classes();
        if let Some(&c) = record.classes().iter().find(|c| learned.contains(c)) {
            return Err(Error::ClassOverlap(c));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_checksum(&self) -> Checksum {
        self.backbone_checksum
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn record(&self, task: TaskId) -> Result<&TaskRecord> {
        self.records
            .iter()
            .find(|r| r.task() == task)
            .ok_or(Error::UnknownTask(task))
    }

    pub fn num_tasks(&self) -> usize {
        self.records.len()
    }

    pub fn next_task(&self) -> TaskId {
        TaskId(self.records.iter().map(|r| r.task().0).max().unwrap_or(0) + 1)
    }

    /// Every class learned so far, sorted.
    pub fn learned_classes(&self) -> Vec<ClassId> {
        let mut c: Vec<ClassId> = self.records.iter().flat_map(|r| r.classes().iter().copied()).collect();
        c.sort_unstable();
        c
    }

    /// Fails if the backbone or any stored adapter set differs from its checksum
    /// at freezing time.
    pub fn verify_frozen(&self) -> Result<()> {
        if self.backbone.checksum() != self.backbone_checksum {
            return Err(Error::FrozenViolation("backbone".into()));
        }
        for r in &self.records {
            if checksum(r.adapters.params()) != r.adapter_checksum {
                return Err(Error::FrozenViolation(alloc::format!("adapters of {}", r.task())));
            }
        }
        Ok(())
    }

    /// Stage-1 output for a whole set; it is shared by every task.
    pub fn stem_features(&self, set: &LabeledSet) -> Result<Tensor> {
        batched_stem(&self.backbone, set)
    }

    /// Feature vector of `x` with task `task`'s adapters inserted.
    pub fn extract_task_feature(&self, task: TaskId, x: &Tensor) -> Result<Tensor> {
        let record = self.record(task)?;
        self.backbone.forward_from(0, x, Some(&record.adapters))
    }

    fn task_features_from_stem(&self, stem: &Tensor, adapters: &AdapterSet) -> Result<Tensor> {
        features_from_stem(&self.backbone, stem, adapters)
    }

    /// Applies the multi-head decision rule to every image of `x`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        if self.records.is_empty() {
            return Err(Error::NoTasks);
        }
        let stem = self.backbone.stem(x)?;
        let features = self
            .records
            .iter()
            .map(|r| self.task_features_from_stem(&stem, &r.adapters))
            .collect::<Result<Vec<_>>>()?;
        self.predict_from_features(&features)
    }

    fn predict_from_features(&self, features: &[Tensor]) -> Result<Vec<Prediction>> {
        let n = features[0].shape()[0];
        if let Some(unified) = &self.unified_head {
            let probs = ops::softmax(&unified.linear.forward(&concat_features(features)?)?)?;
            let width = unified.classes.len();
            return probs
                .data()
                .chunks_exact(width)
                .map(|row| {
                    let class = unified.classes[ops::argmax(row)];
                    let task = self
                        .records
                        .iter()
                        .find(|r| r.classes().contains(&class))
                        .map(TaskRecord::task)
                        .ok_or(Error::UnknownClass(class))?;
                    Ok(Prediction { class, task })
                })
                .collect();
        }
        let probs = self
            .records
            .iter()
            .zip(features)
            .map(|(r, f)| r.head.forward(f))
            .collect::<Result<Vec<_>>>()?;
        (0..n)
            .map(|i| {
                let outputs: Vec<HeadOutput<'_>> = self
                    .records
                    .iter()
                    .zip(&probs)
                    .map(|(r, p)| {
                        let w = r.head.num_outputs();
                        HeadOutput {
                            task: r.task(),
                            classes: r.classes(),
                            probabilities: &p.data()[i * w..(i + 1) * w],
                            others: r.head.others_index(),
                        }
                    })
                    .collect();
                select_prediction(&outputs)
            })
            .collect()
    }

    pub fn predict_set(&self, set: &LabeledSet) -> Result<Vec<Prediction>> {
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut out = Vec::with_capacity(set.len());
        for chunk in idx.chunks(EVAL_BATCH) {
            out.extend(self.predict(&set.batch(chunk)?)?);
        }
        Ok(out)
    }

    /// Mean class recall over the learned classes, plus head-selection and
    /// per-task accuracy. Test samples of unlearned classes are ignored.
    pub fn evaluate(&self, test: &LabeledSet) -> Result<Evaluation> {
        let learned = self.learned_classes();
        let test = test.filter_classes(&learned);
        let predictions = self.predict_set(&test)?;
        let predicted: Vec<ClassId> = predictions.iter().map(|p| p.class).collect();
        let mcr = mean_class_recall(test.labels(), &predicted, &learned)?;
        let true_task = |c: ClassId| self.records.iter().find(|r| r.classes().contains(&c)).map(TaskRecord::task);
        let selected_right = predictions
            .iter()
            .zip(test.labels())
            .filter(|(p, &c)| true_task(c) == Some(p.task))
            .count();
        let per_task = self
            .records
            .iter()
            .map(|r| {
                let (mut hit, mut total) = (0usize, 0usize);
                for (p, c) in predicted.iter().zip(test.labels()) {
                    if r.classes().contains(c) {
                        total += 1;
                        hit += usize::from(p == c);
                    }
                }
                TaskAccuracy {
                    task: r.task(),
                    accuracy: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
                }
            })
            .collect();
        Ok(Evaluation {
            mcr,
            head_selection_accuracy: selected_right as f64 / test.len().max(1) as f64,
            per_task_accuracy: per_task,
        })
    }
}

fn batched_stem(backbone: &Backbone, set: &LabeledSet) -> Result<Tensor> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        let z = backbone.stem(&set.batch(chunk)?)?;
        shape = z.shape().to_vec();
        data.extend_from_slice(z.data());
    }
    if shape.is_empty() {
        return Err(Error::Empty("input set"));
    }
    shape[0] = set.len();
    Tensor::new(&shape, data)
}

fn features_from_stem(backbone: &Backbone, stem: &Tensor, adapters: &AdapterSet) -> Result<Tensor> {
    let n = stem.shape()[0];
    let mut data = Vec::with_capacity(n * backbone.feature_dim());
    let mut start = 0;
    while start < n {
        let count = EVAL_BATCH.min(n - start);
        let f = backbone.forward_from(1, &stem.slice_outer(start, count), Some(adapters))?;
        data.extend_from_slice(f.data());
        start += count;
    }
    Tensor::new(&[n, backbone.feature_dim()], data)
}

fn concat_features(features: &[Tensor]) -> Result<Tensor> {
    let n = features[0].shape()[0];
    let widths: Vec<usize> = features.iter().map(|f| f.shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for (f, &w) in features.iter().zip(&widths) {
            data.extend_from_slice(&f.data()[i * w..(i + 1) * w]);
        }
    }
    Tensor::new(&[n, total], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: TaskId,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mcr: McrReport,
    pub head_selection_accuracy: f64,
    pub per_task_accuracy: Vec<TaskAccuracy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub samples: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Trains a new adapter set and head on `new_data`, with rehearsal exemplars
/// labelled `others` when that output is enabled, and appends the task.
pub fn learn_task(model: &mut ContinualModel, new_data: &LabeledSet, config: &RoundConfig, rng: &mut Rng) -> Result<TrainSummary> {
    if new_data.is_empty() {
        return Err(Error::Empty("new task data"));
    }
    config.validate(model.backbone.num_stages() - 1)?;
    let old = model.learned_classes();
    let classes = new_data.classes();
    if let Some(&c) = classes.iter().find(|c| old.contains(c)) {
        return Err(Error::ClassOverlap(c));
    }
    let toggles = config.toggles;
    let task = model.next_task();
    let mut adapters = if toggles.adapters {
        AdapterSet::new(task, &model.backbone.gap_channels(), &config.adapter, rng)
    } else {
        AdapterSet::identity(task)
    };
    let mut head = TaskHead::new(task, classes, model.backbone.feature_dim(), toggles.others_neuron, rng)?;

    let mut train = new_data.clone();
    if toggles.others_neuron {
        train.extend(&model.memory.to_labeled_set())?;
    }
    let mut learned = old;
    learned.extend(head.classes().iter().copied());
    learned.sort_unstable();
    let targets = head.map_labels(train.labels(), &learned)?;

    let stem = model.stem_features(&train)?;
    let fixed_features = if adapters.is_empty() {
        Some(model.task_features_from_stem(&stem, &adapters)?)
    } else {
        None
    };
    let tc = &config.adapter_training;
    let mut optimizer = Optimizer::new(tc.optimizer.clone())?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut summary = TrainSummary {
        epochs: tc.epochs,
        samples: train.len(),
        final_loss: f64::NAN,
        train_accuracy: 0.0,
    };
    for epoch in 0..tc.epochs {
        optimizer.set_epoch(epoch);
        rng::shuffle(rng, &mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(tc.batch_size) {
            let batch_targets: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let (feature, trace) = match &fixed_features {
                Some(f) => (f.gather_outer(batch), None),
                None => {
                    let (f, t) = model.backbone.forward_traced(1, stem.gather_outer(batch), Some(&adapters))?;
                    (f, Some(t))
                }
            };
            let logits = head.logits(&feature)?;
            let ce = ops::softmax_cross_entropy(&logits, &batch_targets)?;
            loss_sum += ce.loss * batch.len() as f64;
            correct += count_correct(&ce.probabilities, &batch_targets);
            let d_logits = ops::softmax_cross_entropy_backward(&ce.probabilities, &batch_targets)?;
            let d_feature = head.linear.backward(&feature, &d_logits)?;
            if let Some(trace) = trace {
                model.backbone.backward(trace, &d_feature, Some(&mut adapters))?;
            }
            let mut params: Vec<&mut Parameter> = adapters.params_mut();
            params.extend(head.params_mut());
            optimizer.step(&mut params)?;
            zero_grad(&mut params);
        }
        summary.final_loss = loss_sum / train.len() as f64;
        summary.train_accuracy = correct as f64 / train.len() as f64;
        if !summary.final_loss.is_finite() {
            return Err(Error::NonFinite("task training loss"));
        }
        model.verify_frozen()?;
    }
    head.params_mut().into_iter().for_each(Parameter::zero_grad);
    model.push_record(TaskRecord::new(adapters, head))?;
    Ok(summary)
}

fn count_correct(probabilities: &Tensor, targets: &[usize]) -> usize {
    let width = probabilities.shape()[1];
    probabilities
        .data()
        .chunks_exact(width)
        .zip(targets)
        .filter(|(row, &t)| ops::argmax(row) == t)
        .count()
}

/// Loss of the jointly fine-tuned heads: the mean over heads of each head's
/// cross-entropy against its own local labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadLoss {
    pub total: f64,
    pub per_head: Vec<f64>,
    /// Rows whose arg-max matched the local target, summed over heads.
    pub correct: usize,
    /// Rows scored, summed over heads.
    pub evaluated: usize,
}

/// Evaluates the multi-head loss on one batch. `features[s]` are the features
/// extracted with head `s`'s adapters. With `accumulate` set, gradients of the
/// total loss are added to every head's parameters.
///
/// A head without an `others` output only sees samples of its own classes; if
/// none are present its term is zero.
pub fn multi_head_loss(
    heads: &mut [&mut TaskHead],
    features: &[Tensor],
    labels: &[ClassId],
    learned: &[ClassId],
    accumulate: bool,
) -> Result<MultiHeadLoss> {
    if heads.is_empty() {
        return Err(Error::NoTasks);
    }
    if features.len() != heads.len() {
        return Err(Error::Dimension {
            op: "multi_head_loss",
            axis: "heads",
            expected: heads.len(),
            actual: features.len(),
        });
    }
    let scale = 1.0 / heads.len() as f64;
    let mut per_head = Vec::with_capacity(heads.len());
    let (mut correct, mut evaluated) = (0, 0);
    for (head, feature) in heads.iter_mut().zip(features) {
        let map = head.label_map(learned);
        let mut rows = Vec::with_capacity(labels.len());
        let mut targets = Vec::with_capacity(labels.len());
        for (i, &c) in labels.iter().enumerate() {
            match map.get(c) {
                Some(t) => {
                    rows.push(i);
                    targets.push(t);
                }
                None if head.has_others() => return Err(Error::UnknownClass(c)),
                None => {}
            }
        }
        if rows.is_empty() {
            per_head.push(0.0);
            continue;
        }
        let feature = if rows.len() == labels.len() {
            feature.clone()
        } else {
            feature.gather_outer(&rows)
        };
        let logits = head.logits(&feature)?;
        let ce = ops::softmax_cross_entropy(&logits, &targets)?;
        per_head.push(ce.loss);
        correct += count_correct(&ce.probabilities, &targets);
        evaluated += targets.len();
        if accumulate {
            let mut d = ops::softmax_cross_entropy_backward(&ce.probabilities, &targets)?;
            d.data_mut().iter_mut().for_each(|g| *g *= scale);
            head.linear.backward(&feature, &d)?;
        }
    }
    Ok(MultiHeadLoss {
        total: per_head.iter().sum::<f64>() * scale,
        per_head,
        correct,
        evaluated,
    })
}

/// Jointly fine-tunes every task head on `balanced` with the multi-head loss.
/// Adapters and backbone are only read; any change to them is reported as a
/// [`Error::FrozenViolation`].
pub fn finetune_heads(model: &mut ContinualModel, balanced: &LabeledSet, config: &TrainConfig, rng: &mut Rng) -> Result<TrainSummary> {
    if model.records.is_empty() {
        return Err(Error::NoTasks);
    }
    if balanced.is_empty() {
        return Err(Error::Empty("fine-tuning set"));
    }
    config.validate("finetune")?;
    let learned = model.learned_classes();
    let stem = model.stem_features(balanced)?;
    let features = model
        .records
        .iter()
        .map(|r| model.task_features_from_stem(&stem, &r.adapters))
        .collect::<Result<Vec<_>>>()?;
    let mut optimizer = Optimizer::new(config.optimizer.clone())?;
    let mut order: Vec<usize> = (0..balanced.len()).collect();
    let mut final_loss = f64::NAN;
    let mut accuracy = 0.0;
    for epoch in 0..config.epochs {
        optimizer.set_epoch(epoch);
        rng::shuffle(rng, &mut order);
        let mut loss_sum = 0.0;
        let (mut correct, mut evaluated) = (0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let labels: Vec<ClassId> = batch.iter().map(|&i| balanced.label(i)).collect();
            let batch_features: Vec<Tensor> = features.iter().map(|f| f.gather_outer(batch)).collect();
            let mut heads: Vec<&mut TaskHead> = model.records.iter_mut().map(|r| &mut r.head).collect();
            let loss = multi_head_loss(&mut heads, &batch_features, &labels, &learned, true)?;
            loss_sum += loss.total * batch.len() as f64;
            correct += loss.correct;
            evaluated += loss.evaluated;
            let mut params: Vec<&mut Parameter> = heads.into_iter().flat_map(|h| h.params_mut()).collect();
            optimizer.step(&mut params)?;
            zero_grad(&mut params);
        }
        final_loss = loss_sum / balanced.len() as f64;
        accuracy = correct as f64 / evaluated.max(1) as f64;
        if !final_loss.is_finite() {
            return Err(Error::NonFinite("fine-tuning loss"));
        }
        model.verify_frozen()?;
    }
    Ok(TrainSummary {
        epochs: config.epochs,
        samples: balanced.len(),
        final_loss,
        train_accuracy: accuracy,
    })
}

/// Re-trains the unified classifier over concatenated task features.
pub fn train_unified_head(model: &mut ContinualModel, set: &LabeledSet, config: &TrainConfig, rng: &mut Rng) -> Result<TrainSummary> {
    if model.records.is_empty() {
        return Err(Error::NoTasks);
    }
    let learned = model.learned_classes();
    let stem = model.stem_features(set)?;
    let features = model
        .records
        .iter()
        .map(|r| model.task_features_from_stem(&stem, &r.adapters))
        .collect::<Result<Vec<_>>>()?;
    let features = concat_features(&features)?;
    let targets = set
        .labels()
        .iter()
        .map(|c| learned.binary_search(c).map_err(|_| Error::UnknownClass(*c)))
        .collect::<Result<Vec<_>>>()?;
    let mut linear = Linear::new("head.unified", features.shape()[1], learned.len(), rng);
    let mut optimizer = Optimizer::new(config.optimizer.clone())?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut final_loss = f64::NAN;
    let mut accuracy = 0.0;
    for epoch in 0..config.epochs {
        optimizer.set_epoch(epoch);
        rng::shuffle(rng, &mut order);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(config.batch_size) {
            let t: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let x = features.gather_outer(batch);
            let ce = ops::softmax_cross_entropy(&linear.forward(&x)?, &t)?;
            loss_sum += ce.loss * batch.len() as f64;
            correct += count_correct(&ce.probabilities, &t);
            let d = ops::softmax_cross_entropy_backward(&ce.probabilities, &t)?;
            linear.backward(&x, &d)?;
            let mut params = linear.params_mut();
            optimizer.step(&mut params)?;
            zero_grad(&mut params);
        }
        final_loss = loss_sum / set.len() as f64;
        accuracy = correct as f64 / set.len() as f64;
    }
    model.unified_head = Some(UnifiedHead { classes: learned, linear });
    Ok(TrainSummary {
        epochs: config.epochs,
        samples: set.len(),
        final_loss,
        train_accuracy: accuracy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    pub new_classes: Vec<ClassId>,
    pub learned_classes: Vec<ClassId>,
    pub mcr: f64,
    pub accuracy: f64,
    pub per_class_recall: Vec<crate::metrics::ClassRecall>,
    /// Fraction of test samples routed to the head of their own task; absent for
    /// single-head baselines.
    pub head_selection_accuracy: Option<f64>,
    pub per_task_accuracy: Vec<TaskAccuracy>,
    pub task_training: TrainSummary,
    pub finetune: Option<TrainSummary>,
    pub memory_size: usize,
    /// Hex SHA-256 of the backbone parameters.
    pub backbone_checksum: String,
}

pub fn hex(checksum: &Checksum) -> String {
    use core::fmt::Write;
    checksum.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// One full round: learn the task, update memory, fine-tune heads on a balanced
/// set (from round 2 on), then evaluate on `test`.
pub fn run_round(
    model: &mut ContinualModel,
    new_data: &LabeledSet,
    test: &LabeledSet,
    config: &RoundConfig,
    rng: &mut Rng,
) -> Result<RoundReport> {
    let toggles = config.toggles;
    let task_training = learn_task(model, new_data, config, rng)?;
    let learned = model.learned_classes();
    model.memory.update(new_data, &learned)?;
    let round = model.num_tasks();
    let mut finetune = None;
    if toggles.task_specific_heads {
        if toggles.finetune && round >= 2 {
            let balanced = build_finetune_set(&model.memory, new_data, &learned, rng)?;
            finetune = Some(finetune_heads(model, &balanced, &config.finetune, rng)?);
        }
    } else {
        let set = if toggles.finetune && round >= 2 {
            build_finetune_set(&model.memory, new_data, &learned, rng)?
        } else {
            let mut s = new_data.clone();
            let old = model.memory.to_labeled_set().filter_classes(&learned);
            let new_classes = new_data.classes();
            let old_only: Vec<ClassId> = old.classes().into_iter().filter(|c| !new_classes.contains(c)).collect();
            s.extend(&old.filter_classes(&old_only))?;
            s
        };
        finetune = Some(train_unified_head(model, &set, &config.finetune, rng)?);
    }
    model.verify_frozen()?;
    let eval = model.evaluate(test)?;
    Ok(RoundReport {
        round: round as u32,
        new_classes: new_data.classes(),
        learned_classes: learned,
        mcr: eval.mcr.mcr,
        accuracy: eval.mcr.accuracy,
        per_class_recall: eval.mcr.per_class,
        head_selection_accuracy: Some(eval.head_selection_accuracy),
        per_task_accuracy: eval.per_task_accuracy,
        task_training,
        finetune,
        memory_size: model.memory.total(),
        backbone_checksum: hex(&model.backbone_checksum),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn tiny_model() -> ContinualModel {
        let backbone = Backbone::new(BackboneConfig::standard(1, 8, &[4, 4]), &mut rng::seeded(0)).unwrap();
        ContinualModel::new(backbone, RehearsalMemory::new(8, [1, 8, 8], 0))
    }

    fn toy(classes: &[u32], per_class: usize, seed: u64) -> LabeledSet {
        let mut r = rng::seeded(seed);
        let mut set = LabeledSet::empty([1, 8, 8]);
        for &c in classes {
            for _ in 0..per_class {
                let img: Vec<f64> = (0..64).map(|i| if i % 8 == c as usize % 8 { 1.0 } else { 0.1 * rng::normal(&mut r) }).collect();
                set.push(&img, ClassId(c)).unwrap();
            }
        }
        set
    }

    fn quick_config() -> RoundConfig {
        RoundConfig::with_epochs(2, &[], 2, &[])
    }

    #[test]
    fn overlapping_classes_are_rejected() {
        let mut m = tiny_model();
        let mut r = rng::seeded(1);
        learn_task(&mut m, &toy(&[0, 1], 3, 0), &quick_config(), &mut r).unwrap();
        assert_eq!(
            learn_task(&mut m, &toy(&[1, 2], 3, 0), &quick_config(), &mut r),
            Err(Error::ClassOverlap(ClassId(1)))
        );
        assert_eq!(
            learn_task(&mut m, &LabeledSet::empty([1, 8, 8]), &quick_config(), &mut r),
            Err(Error::Empty("new task data"))
        );
    }

    #[test]
    fn predict_without_tasks_fails() {
        let m = tiny_model();
        assert_eq!(m.predict(&Tensor::zeros(&[1, 1, 8, 8])), Err(Error::NoTasks));
    }

    #[test]
    fn unknown_task_feature() {
        let m = tiny_model();
        assert_eq!(
            m.extract_task_feature(TaskId(4), &Tensor::zeros(&[1, 1, 8, 8])),
            Err(Error::UnknownTask(TaskId(4)))
        );
    }

    #[test]
    fn finetune_with_tampered_adapter_is_caught() {
        let mut m = tiny_model();
        let mut r = rng::seeded(1);
        learn_task(&mut m, &toy(&[0, 1], 4, 0), &quick_config(), &mut r).unwrap();
        m.records[0].adapters.set_alpha(0.5);
        let set = toy(&[0, 1], 2, 1);
        assert!(matches!(
            finetune_heads(&mut m, &set, &quick_config().finetune, &mut r),
            Err(Error::FrozenViolation(_))
        ));
    }

    #[test]
    fn two_rounds_keep_first_round_frozen() {
        let mut m = tiny_model();
        let mut r = rng::seeded(2);
        let test = toy(&[0, 1, 2, 3], 2, 9);
        run_round(&mut m, &toy(&[0, 1], 6, 0), &test, &quick_config(), &mut r).unwrap();
        let first = m.records()[0].clone();
        let report = run_round(&mut m, &toy(&[2, 3], 6, 1), &test, &quick_config(), &mut r).unwrap();
        assert_eq!(report.round, 2);
        assert!(report.finetune.is_some());
        assert_eq!(m.records()[0].adapters, first.adapters);
        assert_ne!(m.records()[0].head, first.head);
        assert!(m.memory.total() <= 8);
    }
}
