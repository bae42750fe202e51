//! Per-task classifier heads with an optional `others` output and the
//! multi-head prediction rule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::ids::{ClassId, TaskId};
use crate::layers::Linear;
use crate::ops;
use crate::rng::Rng;
use crate::tensor::{Parameter, Tensor};

/// One fully connected layer followed by a softmax over the task's classes and,
/// when enabled, a trailing `others` output that absorbs every other class.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    task: TaskId,
    classes: Vec<ClassId>,
    with_others: bool,
    pub linear: Linear,
}

impl TaskHead {
    pub fn new(task: TaskId, classes: Vec<ClassId>, feature_dim: usize, with_others: bool, rng: &mut Rng) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Empty("head class list"));
        }
        let outputs = classes.len() + usize::from(with_others);
        Ok(Self {
            linear: Linear::new(&format!("head.t{}", task.0), feature_dim, outputs, rng),
            task,
            classes,
            with_others,
        })
    }

    /// Rebuilds a head from stored weights; `weight` is `[C_t (+1), D]`.
    pub fn from_parts(task: TaskId, classes: Vec<ClassId>, with_others: bool, weight: Tensor, bias: Tensor) -> Result<Self> {
        let outputs = classes.len() + usize::from(with_others);
        let [rows, _] = weight.dims2("task head weight")?;
        if rows != outputs || bias.len() != outputs {
            return Err(Error::Dimension {
                op: "task head",
                axis: "outputs",
                expected: outputs,
                actual: rows,
            });
        }
        Ok(Self {
            linear: Linear::from_parts(&format!("head.t{}", task.0), weight, bias),
            task,
            classes,
            with_others,
        })
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn has_others(&self) -> bool {
        self.with_others
    }

    pub fn num_outputs(&self) -> usize {
        self.classes.len() + usize::from(self.with_others)
    }

    /// Index of the `others` output, always the last one.
    pub fn others_index(&self) -> Option<usize> {
        self.with_others.then_some(self.classes.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.linear.in_features()
    }

    pub fn logits(&self, feature: &Tensor) -> Result<Tensor> {
        self.linear.forward(feature)
    }

    /// Softmax probabilities, `[N, num_outputs]`.
    pub fn forward(&self, feature: &Tensor) -> Result<Tensor> {
        ops::softmax(&self.logits(feature)?)
    }

    pub fn label_map(&self, learned: &[ClassId]) -> LabelMap {
        LabelMap::new(self, learned)
    }

    /// Local targets for `labels`; in-task classes keep their position, every
    /// other learned class maps to `others`.
    pub fn map_labels(&self, labels: &[ClassId], learned: &[ClassId]) -> Result<Vec<usize>> {
        self.label_map(learned).map(labels)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        self.linear.params()
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        self.linear.params_mut()
    }
}

/// Global class id to local output index for one head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    map: BTreeMap<ClassId, usize>,
}

impl LabelMap {
    pub fn new(head: &TaskHead, learned: &[ClassId]) -> Self {
        let mut map: BTreeMap<ClassId, usize> = head
            .classes
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
        if let Some(others) = head.others_index() {
            for &c in learned {
                map.entry(c).or_insert(others);
            }
        }
        Self { map }
    }

    pub fn get(&self, class: ClassId) -> Option<usize> {
        self.map.get(&class).copied()
    }

    pub fn map(&self, labels: &[ClassId]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&c| self.get(c).ok_or(Error::UnknownClass(c)))
            .collect()
    }
}

/// One head's probability row for a single sample.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput<'a> {
    pub task: TaskId,
    pub classes: &'a [ClassId],
    pub probabilities: &'a [f64],
    pub others: Option<usize>,
}

impl HeadOutput<'_> {
    fn in_task(&self) -> &[f64] {
        &self.probabilities[..self.classes.len()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub class: ClassId,
    pub task: TaskId,
}

/// Chooses the head with the smallest `others` probability (ties go to the lower
/// task id), then that head's most probable in-task class; `others` is never
/// returned. Heads without an `others` output are ranked by their most
/// confident in-task probability instead.
pub fn select_prediction(outputs: &[HeadOutput<'_>]) -> Result<Prediction> {
    let score = |o: &HeadOutput<'_>| match o.others {
        Some(i) => o.probabilities[i],
        None => 1.0 - o.in_task().iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let chosen = outputs
        .iter()
        .min_by(|a, b| score(a).total_cmp(&score(b)).then(a.task.cmp(&b.task)))
        .ok_or(Error::NoTasks)?;
    Ok(Prediction {
        class: chosen.classes[ops::argmax(chosen.in_task())],
        task: chosen.task,
    })
}
