//! Class-balanced rehearsal memory and the balanced fine-tuning set.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::ids::ClassId;
use crate::rng::{self, Rng};

/// Per-class quotas for a total budget: `budget / n` each, with the remainder
/// handed out one by one to the lowest class ids.
pub fn class_quotas(budget: usize, classes: &[ClassId]) -> Result<BTreeMap<ClassId, usize>> {
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.is_empty() {
        return Ok(BTreeMap::new());
    }
    if budget < sorted.len() {
        return Err(Error::MemoryBudgetTooSmall {
            budget,
            classes: sorted.len(),
        });
    }
    let base = budget / sorted.len();
    let extra = budget % sorted.len();
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, c)| (c, base + usize::from(i < extra)))
        .collect())
}

/// Fixed-budget store of old-class exemplars.
#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalMemory {
    budget: usize,
    image_shape: [usize; 3],
    store: BTreeMap<ClassId, Vec<Vec<f64>>>,
    rng: Rng,
}

impl RehearsalMemory {
    pub fn new(budget: usize, image_shape: [usize; 3], selection_seed: u64) -> Self {
        Self {
            budget,
            image_shape,
            store: BTreeMap::new(),
            rng: rng::seeded(selection_seed),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn total(&self) -> usize {
        self.store.values().map(Vec::len).sum()
    }

    pub fn counts(&self) -> BTreeMap<ClassId, usize> {
        self.store.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.store.keys().copied().collect()
    }

    pub fn exemplars(&self, class: ClassId) -> &[Vec<f64>] {
        self.store.get(&class).map_or(&[], Vec::as_slice)
    }

    /// Re-balances for `learned` (all classes learned so far, including those in
    /// `new_data`): existing classes keep their earliest exemplars up to the new
    /// quota, classes seen for the first time are drawn uniformly at random.
    pub fn update(&mut self, new_data: &LabeledSet, learned: &[ClassId]) -> Result<()> {
        if new_data.image_shape() != self.image_shape {
            return Err(Error::Shape {
                op: "rehearsal memory",
                reason: alloc::format!("{:?} vs {:?}", new_data.image_shape(), self.image_shape),
            });
        }
        let quotas = class_quotas(self.budget, learned)?;
        self.store.retain(|c, _| quotas.contains_key(c));
        for (class, exemplars) in self.store.iter_mut() {
            exemplars.truncate(quotas[class]);
        }
        for (class, mut indices) in new_data.indices_by_class() {
            if self.store.contains_key(&class) {
                continue;
            }
            let quota = *quotas.get(&class).ok_or(Error::UnknownClass(class))?;
            rng::shuffle(&mut self.rng, &mut indices);
            let chosen = indices.iter().take(quota).map(|&i| new_data.image(i).to_vec()).collect();
            self.store.insert(class, chosen);
        }
        debug_assert!(self.total() <= self.budget);
        Ok(())
    }

    pub fn to_labeled_set(&self) -> LabeledSet {
        let mut set = LabeledSet::empty(self.image_shape);
        for (&class, exemplars) in &self.store {
            for image in exemplars {
                set.push(image, class).expect("exemplar shape checked on insert");
            }
        }
        set
    }

    /// Replaces the stored exemplars, e.g. when restoring a checkpoint.
    pub fn restore(&mut self, set: &LabeledSet) -> Result<()> {
        if set.image_shape() != self.image_shape {
            return Err(Error::Shape {
                op: "rehearsal memory",
                reason: alloc::format!("{:?} vs {:?}", set.image_shape(), self.image_shape),
            });
        }
        if set.len() > self.budget {
            return Err(Error::Config(alloc::format!(
                "{} exemplars exceed the memory budget {}",
                set.len(),
                self.budget
            )));
        }
        self.store.clear();
        for i in 0..set.len() {
            self.store.entry(set.label(i)).or_default().push(set.image(i).to_vec());
        }
        Ok(())
    }
}

/// Equal number of samples for every learned class. Current-task classes are
/// subsampled at random from `current`; older classes come from memory. The
/// per-class count is the memory's minimum quota `budget / #learned`, lowered to
/// the scarcest class if any holds fewer samples.
pub fn build_finetune_set(
    memory: &RehearsalMemory,
    current: &LabeledSet,
    learned: &[ClassId],
    rng: &mut Rng,
) -> Result<LabeledSet> {
    let mut learned = learned.to_vec();
    learned.sort_unstable();
    learned.dedup();
    if learned.is_empty() {
        return Err(Error::Empty("learned class list"));
    }
    if memory.budget() < learned.len() {
        return Err(Error::MemoryBudgetTooSmall {
            budget: memory.budget(),
            classes: learned.len(),
        });
    }
    let by_class = current.indices_by_class();
    let available = |c: ClassId| match by_class.get(&c) {
        Some(v) => v.len(),
        None => memory.exemplars(c).len(),
    };
    let mut per_class = memory.budget() / learned.len();
    for &c in &learned {
        match available(c) {
            0 => return Err(Error::NoSamples(c)),
            n => per_class = per_class.min(n),
        }
    }
    let mut set = LabeledSet::empty(current.image_shape());
    for &c in &learned {
        match by_class.get(&c) {
            Some(indices) => {
                let mut indices = indices.clone();
                rng::shuffle(rng, &mut indices);
                for &i in &indices[..per_class] {
                    set.push(current.image(i), c)?;
                }
            }
            None => {
                for image in &memory.exemplars(c)[..per_class] {
                    set.push(image, c)?;
                }
            }
        }
    }
    Ok(set)
}
