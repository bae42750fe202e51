//! End-to-end runs over a task split: backbone pretraining on the base classes and
//! the round-by-round continual procedure.

use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain_backbone, Backbone, BackboneConfig, PretrainConfig, PretrainReport};
use crate::data::LabeledSet;
use crate::engine::{run_round, ContinualModel, RoundConfig, RoundReport};
use crate::error::{Error, Result};
use crate::memory::RehearsalMemory;
use crate::rng::{self, Rng};
use crate::split::TaskSplit;

/// Model-side settings of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub round: RoundConfig,
    pub memory_budget: usize,
}

/// Builds a backbone from `seed` and pretrains it on the split's base classes.
pub fn pretrain_for_split(
    train: &LabeledSet,
    test: &LabeledSet,
    split: &TaskSplit,
    backbone: &BackboneConfig,
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<(Backbone, PretrainReport)> {
    split.validate()?;
    if split.base_classes.is_empty() {
        return Err(Error::Config("split has no base classes for pretraining".into()));
    }
    if train.image_shape() != backbone.input_shape() {
        return Err(Error::Config(alloc::format!(
            "data shape {:?} does not match backbone input {:?}",
            train.image_shape(),
            backbone.input_shape()
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut model = Backbone::new(backbone.clone(), &mut rng)?;
    let report = pretrain_backbone(
        &mut model,
        &train.filter_classes(&split.base_classes),
        &test.filter_classes(&split.base_classes),
        pretrain,
        &mut rng,
    )?;
    Ok((model, report))
}

/// Round-by-round driver; call [`ContinualRun::step`] until it returns `None`.
pub struct ContinualRun<'a> {
    model: ContinualModel,
    train: &'a LabeledSet,
    test: &'a LabeledSet,
    split: &'a TaskSplit,
    config: RoundConfig,
    rng: Rng,
    next_round: usize,
}

impl<'a> ContinualRun<'a> {
    pub fn new(
        backbone: &Backbone,
        train: &'a LabeledSet,
        test: &'a LabeledSet,
        split: &'a TaskSplit,
        config: RoundConfig,
        memory_budget: usize,
        seed: u64,
    ) -> Result<Self> {
        split.validate()?;
        config.validate(backbone.num_stages() - 1)?;
        if memory_budget == 0 {
            return Err(Error::Config("memory_budget must be positive".into()));
        }
        let mut rng = rng::seeded(seed);
        let memory = RehearsalMemory::new(memory_budget, train.image_shape(), rng.next_u64());
        Ok(Self {
            model: ContinualModel::new(backbone.clone(), memory),
            train,
            test,
            split,
            config,
            rng,
            next_round: 0,
        })
    }

    pub fn model(&self) -> &ContinualModel {
        &self.model
    }

    pub fn into_model(self) -> ContinualModel {
        self.model
    }

    pub fn step(&mut self) -> Option<Result<RoundReport>> {
        let group = self.split.rounds.get(self.next_round)?;
        self.next_round += 1;
        let data = self.train.filter_classes(group);
        if data.is_empty() {
            return Some(Err(Error::Empty("round training data")));
        }
        Some(run_round(&mut self.model, &data, self.test, &self.config, &mut self.rng))
    }
}

/// Runs every round and returns the reports together with the final model.
pub fn run_continual(
    backbone: &Backbone,
    train: &LabeledSet,
    test: &LabeledSet,
    split: &TaskSplit,
    config: &RoundConfig,
    memory_budget: usize,
    seed: u64,
) -> Result<(ContinualModel, Vec<RoundReport>)> {
    let mut run = ContinualRun::new(backbone, train, test, split, config.clone(), memory_budget, seed)?;
    let mut reports = Vec::new();
    while let Some(report) = run.step() {
        reports.push(report?);
    }
    Ok((run.into_model(), reports))
}
