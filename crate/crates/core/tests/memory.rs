use std::collections::BTreeMap;

use acl_core::data::LabeledSet;
use acl_core::memory::{build_finetune_set, class_quotas, RehearsalMemory};
use acl_core::rng;
use acl_core::{ClassId, Error};
use proptest::prelude::*;

fn dataset(classes: std::ops::Range<u32>, per_class: usize, tag: f64) -> LabeledSet {
    let mut set = LabeledSet::empty([1, 2, 2]);
    for c in classes {
        for i in 0..per_class {
            let v = tag + c as f64 * 1000.0 + i as f64;
            set.push(&[v, v, v, v], ClassId(c)).unwrap();
        }
    }
    set
}

fn histogram(set: &LabeledSet) -> BTreeMap<ClassId, usize> {
    let mut h = BTreeMap::new();
    for &c in set.labels() {
        *h.entry(c).or_insert(0) += 1;
    }
    h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn memory_stays_within_budget_and_balanced(
        budget in 1usize..120,
        rounds in proptest::collection::vec(1u32..5, 1..6),
        seed in any::<u64>(),
    ) {
        let mut memory = RehearsalMemory::new(budget, [1, 2, 2], seed);
        let mut learned = Vec::new();
        let mut next = 0u32;
        for per_round in rounds {
            let data = dataset(next..next + per_round, budget + 1, 0.0);
            learned.extend((next..next + per_round).map(ClassId));
            next += per_round;
            let result = memory.update(&data, &learned);
            if budget < learned.len() {
                prop_assert_eq!(result, Err(Error::MemoryBudgetTooSmall { budget, classes: learned.len() }));
                return Ok(());
            }
            result.unwrap();
            prop_assert!(memory.total() <= budget);
            let counts = memory.counts();
            prop_assert_eq!(counts.len(), learned.len());
            let max = *counts.values().max().unwrap();
            let min = *counts.values().min().unwrap();
            prop_assert!(max - min <= 1);
            prop_assert_eq!(memory.total(), budget);
        }
    }

    #[test]
    fn finetune_set_is_exactly_uniform(
        budget in 4usize..150,
        old in 1u32..6,
        new in 1u32..4,
        extra in 0usize..30,
        seed in any::<u64>(),
    ) {
        let mut memory = RehearsalMemory::new(budget, [1, 2, 2], seed);
        let old_ids: Vec<ClassId> = (0..old).map(ClassId).collect();
        prop_assume!(budget >= (old + new) as usize);
        memory.update(&dataset(0..old, budget + extra, 0.0), &old_ids).unwrap();
        let current = dataset(old..old + new, budget / (old + new) as usize + extra, 0.5);
        let learned: Vec<ClassId> = (0..old + new).map(ClassId).collect();
        memory.update(&current, &learned).unwrap();
        let set = build_finetune_set(&memory, &current, &learned, &mut rng::seeded(seed)).unwrap();
        let h = histogram(&set);
        prop_assert_eq!(h.len(), learned.len());
        let first = *h.values().next().unwrap();
        prop_assert!(first >= 1);
        prop_assert!(h.values().all(|&n| n == first));
        prop_assert_eq!(first, budget / learned.len());
    }

    #[test]
    fn quotas_sum_to_budget(budget in 0usize..500, n in 1u32..40) {
        let classes: Vec<ClassId> = (0..n).map(ClassId).collect();
        match class_quotas(budget, &classes) {
            Ok(q) => {
                prop_assert_eq!(q.values().sum::<usize>(), budget);
                let max = *q.values().max().unwrap();
                let min = *q.values().min().unwrap();
                prop_assert!(max - min <= 1);
                prop_assert!(q.values().collect::<Vec<_>>().windows(2).all(|w| w[0] >= w[1]));
            }
            Err(e) => prop_assert_eq!(e, Error::MemoryBudgetTooSmall { budget, classes: n as usize }),
        }
    }
}

#[test]
fn existing_classes_keep_their_earliest_exemplars() {
    let mut memory = RehearsalMemory::new(8, [1, 2, 2], 3);
    memory.update(&dataset(0..2, 10, 0.0), &[ClassId(0), ClassId(1)]).unwrap();
    let before: Vec<Vec<f64>> = memory.exemplars(ClassId(0)).to_vec();
    memory
        .update(&dataset(2..4, 10, 0.0), &(0..4).map(ClassId).collect::<Vec<_>>())
        .unwrap();
    assert_eq!(memory.exemplars(ClassId(0)), &before[..2]);
}

#[test]
fn finetune_set_draws_old_classes_from_memory_only() {
    let mut memory = RehearsalMemory::new(6, [1, 2, 2], 4);
    memory.update(&dataset(0..1, 10, 0.0), &[ClassId(0)]).unwrap();
    let current = dataset(1..2, 10, 0.5);
    memory.update(&current, &[ClassId(0), ClassId(1)]).unwrap();
    let set = build_finetune_set(&memory, &current, &[ClassId(0), ClassId(1)], &mut rng::seeded(0)).unwrap();
    let stored = memory.exemplars(ClassId(0));
    for i in 0..set.len() {
        if set.label(i) == ClassId(0) {
            assert!(stored.iter().any(|e| e.as_slice() == set.image(i)));
        }
    }
}
