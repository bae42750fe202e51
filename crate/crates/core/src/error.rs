use alloc::string::String;

use crate::ids::{ClassId, TaskId};

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: axis `{axis}` expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape for {op}: {reason}")]
    Shape { op: &'static str, reason: String },
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("parameter `{name}` is trainable but has no gradient")]
    MissingGradient { name: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("unknown class {0}")]
    UnknownClass(ClassId),
    #[error("class {0} was already learned by an earlier task")]
    ClassOverlap(ClassId),
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("no learned tasks")]
    NoTasks,
    #[error("memory budget {budget} cannot hold one exemplar for each of {classes} classes")]
    MemoryBudgetTooSmall { budget: usize, classes: usize },
    #[error("class {0} has no samples available")]
    NoSamples(ClassId),
    #[error("pretraining reached {achieved:.4} held-out accuracy, below the required {required:.4}")]
    PretrainFailed { achieved: f64, required: f64 },
    #[error("frozen parameters changed: {0}")]
    FrozenViolation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
}
