//! Reference points for the continual runs: naive sequential fine-tuning (the
//! forgetting floor) and joint training on all classes at once (the upper bound).
//! Both fine-tune the whole backbone under a single head.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::LabeledSet;
use crate::engine::{hex, RoundReport, TaskAccuracy, TrainConfig, TrainSummary};
use crate::error::{Error, Result};
use crate::ids::{ClassId, TaskId};
use crate::layers::Linear;
use crate::metrics::mean_class_recall;
use crate::ops;
use crate::optim::{zero_grad, Optimizer};
use crate::rng::{self, Rng};
use crate::split::TaskSplit;
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Naive,
    Joint,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Naive => "naive",
            BaselineKind::Joint => "joint",
        }
    }
}

/// Backbone plus one linear head over all known classes, everything trainable.
#[derive(Debug, Clone)]
pub struct SingleHeadClassifier {
    pub backbone: Backbone,
    pub head: Linear,
    pub classes: Vec<ClassId>,
}

impl SingleHeadClassifier {
    pub fn new(mut backbone: Backbone, classes: Vec<ClassId>, rng: &mut Rng) -> Self {
        backbone.unfreeze();
        let head = Linear::new("baseline.head", backbone.feature_dim(), classes.len(), rng);
        Self { backbone, head, classes }
    }

    /// Adds output rows for `new_classes`, keeping the existing rows.
    pub fn grow(&mut self, new_classes: &[ClassId], rng: &mut Rng) -> Result<()> {
        let d = self.head.in_features();
        let fresh = Linear::new("baseline.head", d, new_classes.len(), rng);
        let mut w = self.head.weight.data().to_vec();
        w.extend_from_slice(fresh.weight.data());
        let mut b = self.head.bias.data().to_vec();
        b.extend_from_slice(fresh.bias.data());
        self.classes.extend_from_slice(new_classes);
        let rows = self.classes.len();
        self.head = Linear::from_parts("baseline.head", Tensor::new(&[rows, d], w)?, Tensor::new(&[rows], b)?);
        Ok(())
    }

    pub fn train(&mut self, set: &LabeledSet, config: &TrainConfig, rng: &mut Rng) -> Result<TrainSummary> {
        if set.is_empty() {
            return Err(Error::Empty("baseline training set"));
        }
        let targets = set
            .labels()
            .iter()
            .map(|c| self.classes.iter().position(|k| k == c).ok_or(Error::UnknownClass(*c)))
            .collect::<Result<Vec<_>>>()?;
        let mut optimizer = Optimizer::new(config.optimizer.clone())?;
        let mut order: Vec<usize> = (0..set.len()).collect();
        let mut summary = TrainSummary {
            epochs: config.epochs,
            samples: set.len(),
            final_loss: f64::NAN,
            train_accuracy: 0.0,
        };
        for epoch in 0..config.epochs {
            optimizer.set_epoch(epoch);
            rng::shuffle(rng, &mut order);
            let (mut loss_sum, mut correct) = (0.0, 0usize);
            for batch in order.chunks(config.batch_size.max(1)) {
                let t: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
                let (feature, trace) = self.backbone.forward_traced(0, set.batch(batch)?, None)?;
                let ce = ops::softmax_cross_entropy(&self.head.forward(&feature)?, &t)?;
                loss_sum += ce.loss * batch.len() as f64;
                let width = self.classes.len();
                correct += ce
                    .probabilities
                    .data()
                    .chunks_exact(width)
                    .zip(&t)
                    .filter(|(row, &k)| ops::argmax(row) == k)
                    .count();
                let d_logits = ops::softmax_cross_entropy_backward(&ce.probabilities, &t)?;
                let d_feature = self.head.backward(&feature, &d_logits)?;
                self.backbone.backward(trace, &d_feature, None)?;
                let mut params: Vec<&mut Parameter> = self.backbone.params_mut();
                params.extend(self.head.params_mut());
                optimizer.step(&mut params)?;
                zero_grad(&mut params);
            }
            summary.final_loss = loss_sum / set.len() as f64;
            summary.train_accuracy = correct as f64 / set.len() as f64;
            if !summary.final_loss.is_finite() {
                return Err(Error::NonFinite("baseline training loss"));
            }
        }
        Ok(summary)
    }

    pub fn predict_set(&self, set: &LabeledSet) -> Result<Vec<ClassId>> {
        self.predict_among(set, &self.classes)
    }

    /// Arg-max restricted to the outputs of `allowed`.
    pub fn predict_among(&self, set: &LabeledSet, allowed: &[ClassId]) -> Result<Vec<ClassId>> {
        let columns = allowed
            .iter()
            .map(|c| self.classes.iter().position(|k| k == c).ok_or(Error::UnknownClass(*c)))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.head.forward(&self.backbone.features(set, None, 64)?)?;
        Ok(logits
            .data()
            .chunks_exact(self.classes.len())
            .map(|row| {
                let picked: Vec<f64> = columns.iter().map(|&j| row[j]).collect();
                allowed[ops::argmax(&picked)]
            })
            .collect())
    }
}

fn baseline_report(
    model: &SingleHeadClassifier,
    test: &LabeledSet,
    split: &TaskSplit,
    round: usize,
    summary: TrainSummary,
) -> Result<RoundReport> {
    let learned = {
        let mut c = split.classes_through(round);
        c.sort_unstable();
        c
    };
    let test = test.filter_classes(&learned);
    let predicted = model.predict_among(&test, &learned)?;
    let mcr = mean_class_recall(test.labels(), &predicted, &learned)?;
    let per_task_accuracy = split.rounds[..round]
        .iter()
        .enumerate()
        .map(|(i, group)| {
            let (mut hit, mut total) = (0usize, 0usize);
            for (p, c) in predicted.iter().zip(test.labels()) {
                if group.contains(c) {
                    total += 1;
                    hit += usize::from(p == c);
                }
            }
            TaskAccuracy {
                task: TaskId(i as u32 + 1),
                accuracy: if total == 0 { 0.0 } else { hit as f64 / total as f64 },
            }
        })
        .collect();
    let mut new_classes = split.rounds[round - 1].clone();
    new_classes.sort_unstable();
    Ok(RoundReport {
        round: round as u32,
        new_classes,
        learned_classes: learned,
        mcr: mcr.mcr,
        accuracy: mcr.accuracy,
        per_class_recall: mcr.per_class,
        head_selection_accuracy: None,
        per_task_accuracy,
        task_training: summary,
        finetune: None,
        memory_size: 0,
        backbone_checksum: hex(&model.backbone.checksum()),
    })
}

/// Runs a baseline over every round of `split`, starting from `pretrained`. The
/// joint model is trained once on every round's classes; its round-`r` report
/// restricts predictions to the classes of rounds `1..=r`.
pub fn run_baseline(
    kind: BaselineKind,
    pretrained: &Backbone,
    train: &LabeledSet,
    test: &LabeledSet,
    split: &TaskSplit,
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<RoundReport>> {
    split.validate()?;
    let mut rng = rng::seeded(seed);
    let mut reports = Vec::with_capacity(split.rounds.len());
    let mut naive: Option<SingleHeadClassifier> = None;
    for round in 1..=split.rounds.len() {
        let group = &split.rounds[round - 1];
        let (model, summary) = match kind {
            BaselineKind::Naive => {
                let model = match naive.as_mut() {
                    Some(m) => {
                        m.grow(group, &mut rng)?;
                        m
                    }
                    None => naive.insert(SingleHeadClassifier::new(pretrained.clone(), group.clone(), &mut rng)),
                };
                let summary = model.train(&train.filter_classes(group), config, &mut rng)?;
                (&*model, summary)
            }
            BaselineKind::Joint => break,
        };
        reports.push(baseline_report(model, test, split, round, summary)?);
    }
    if kind == BaselineKind::Joint {
        let classes = split.classes_through(split.rounds.len());
        let mut model = SingleHeadClassifier::new(pretrained.clone(), classes.clone(), &mut rng);
        let summary = model.train(&train.filter_classes(&classes), config, &mut rng)?;
        for round in 1..=split.rounds.len() {
            reports.push(baseline_report(&model, test, split, round, summary)?);
        }
    }
    Ok(reports)
}

pub fn describe(kind: BaselineKind) -> String {
    String::from(match kind {
        BaselineKind::Naive => "single head, backbone fine-tuned on each round's data only",
        BaselineKind::Joint => "single head, backbone fine-tuned on all classes at once",
    })
}
