//! Partition of the class space into base (pretraining) classes and rounds.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ClassId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSplit {
    pub base_classes: Vec<ClassId>,
    pub rounds: Vec<Vec<ClassId>>,
}

impl TaskSplit {
    /// Classes `0..num_base` for pretraining, then `rounds` groups of `per_round`
    /// consecutive ids.
    pub fn sequential(num_base: usize, rounds: usize, per_round: usize) -> Self {
        let id = |i: usize| ClassId(i as u32);
        Self {
            base_classes: (0..num_base).map(id).collect(),
            rounds: (0..rounds)
                .map(|r| (0..per_round).map(|j| id(num_base + r * per_round + j)).collect())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() {
            return Err(Error::Config("split has no rounds".into()));
        }
        let mut seen: Vec<ClassId> = self.base_classes.clone();
        for (i, group) in self.rounds.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::Config(format!("round {} has no classes", i + 1)));
            }
            for c in group {
                if seen.contains(c) {
                    return Err(Error::Config(format!("class {c} appears twice in the split")));
                }
                seen.push(*c);
            }
        }
        let mut base = self.base_classes.clone();
        base.sort_unstable();
        base.dedup();
        if base.len() != self.base_classes.len() {
            return Err(Error::Config("duplicate base class".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.base_classes.len() + self.rounds.iter().map(Vec::len).sum::<usize>()
    }

    /// Classes of rounds `1..=round`.
    pub fn classes_through(&self, round: usize) -> Vec<ClassId> {
        self.rounds.iter().take(round).flatten().copied().collect()
    }
}
