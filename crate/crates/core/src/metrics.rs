//! Mean class recall.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub class: ClassId,
    pub recall: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McrReport {
    pub mcr: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassRecall>,
}

/// Mean over `classes` of the fraction of each class's samples predicted correctly.
/// Every class in `classes` needs at least one sample, and every true label must
/// belong to `classes`.
pub fn mean_class_recall(truth: &[ClassId], predicted: &[ClassId], classes: &[ClassId]) -> Result<McrReport> {
    if truth.len() != predicted.len() {
        return Err(Error::Dimension {
            op: "mean_class_recall",
            axis: "predictions",
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    let mut tally: BTreeMap<ClassId, (usize, usize)> = classes.iter().map(|&c| (c, (0, 0))).collect();
    if tally.is_empty() {
        return Err(Error::Empty("class list"));
    }
    for (&t, &p) in truth.iter().zip(predicted) {
        let entry = tally.get_mut(&t).ok_or(Error::UnknownClass(t))?;
        entry.1 += 1;
        if t == p {
            entry.0 += 1;
        }
    }
    let mut per_class = Vec::with_capacity(tally.len());
    for (&class, &(correct, support)) in &tally {
        if support == 0 {
            return Err(Error::NoSamples(class));
        }
        per_class.push(ClassRecall {
            class,
            recall: correct as f64 / support as f64,
            support,
        });
    }
    let mcr = per_class.iter().map(|c| c.recall).sum::<f64>() / per_class.len() as f64;
    let correct: usize = tally.values().map(|&(c, _)| c).sum();
    let report = McrReport {
        mcr,
        accuracy: correct as f64 / truth.len() as f64,
        per_class,
    };
    debug_assert_eq!(report.mcr.to_bits(), confusion_mcr(truth, predicted, classes).to_bits());
    Ok(report)
}

/// Independent tally through a full confusion matrix, used to cross-check
/// [`mean_class_recall`] in debug builds.
fn confusion_mcr(truth: &[ClassId], predicted: &[ClassId], classes: &[ClassId]) -> f64 {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let n = sorted.len();
    let mut matrix = alloc::vec![0usize; n * (n + 1)];
    for (&t, &p) in truth.iter().zip(predicted) {
        let row = sorted.binary_search(&t).expect("validated by caller");
        let col = sorted.binary_search(&p).unwrap_or(n);
        matrix[row * (n + 1) + col] += 1;
    }
    let recalls = (0..n).map(|r| {
        let row = &matrix[r * (n + 1)..(r + 1) * (n + 1)];
        row[r] as f64 / row.iter().sum::<usize>() as f64
    });
    recalls.sum::<f64>() / n as f64
}
