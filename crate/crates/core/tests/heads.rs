use std::collections::HashMap;

use acl_core::heads::{select_prediction, HeadOutput, Prediction, TaskHead};
use acl_core::rng::{self, Rng};
use acl_core::{ClassId, Error, TaskId, Tensor};

fn ids(v: &[u32]) -> Vec<ClassId> {
    v.iter().map(|&c| ClassId(c)).collect()
}

fn out<'a>(task: u32, classes: &'a [ClassId], probabilities: &'a [f64]) -> HeadOutput<'a> {
    HeadOutput {
        task: TaskId(task),
        classes,
        probabilities,
        others: Some(classes.len()),
    }
}

#[test]
fn single_head_picks_in_task_argmax() {
    let classes = ids(&[3, 7]);
    let p = [0.7, 0.2, 0.1];
    assert_eq!(select_prediction(&[out(1, &classes, &p)]).unwrap().class, ClassId(3));
}

#[test]
fn smallest_others_wins() {
    let (c1, c2) = (ids(&[0, 1]), ids(&[2, 3]));
    let (p1, p2) = ([0.05, 0.05, 0.9], [0.1, 0.7, 0.2]);
    let pred = select_prediction(&[out(1, &c1, &p1), out(2, &c2, &p2)]).unwrap();
    assert_eq!(pred, Prediction { class: ClassId(3), task: TaskId(2) });
}

#[test]
fn ties_go_to_the_lower_task() {
    let (c1, c2) = (ids(&[0, 1]), ids(&[2, 3]));
    let (p1, p2) = ([0.1, 0.4, 0.5], [0.4, 0.1, 0.5]);
    let pred = select_prediction(&[out(2, &c2, &p2), out(1, &c1, &p1)]).unwrap();
    assert_eq!(pred.task, TaskId(1));
    assert_eq!(pred.class, ClassId(1));
}

#[test]
fn no_heads_is_an_error() {
    assert_eq!(select_prediction(&[]), Err(Error::NoTasks));
}

/// Probabilities on a coarse grid so that ties in both stages are common.
fn random_row(g: &mut Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| (1 + rng::below(g, 4)) as f64).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn brute_force(heads: &[(u32, Vec<ClassId>, Vec<f64>)]) -> ClassId {
    let mut best: Option<(f64, u32, usize)> = None;
    for (i, (task, classes, p)) in heads.iter().enumerate() {
        let others = p[classes.len()];
        let better = match best {
            None => true,
            Some((o, t, _)) => others < o || (others == o && *task < t),
        };
        if better {
            best = Some((others, *task, i));
        }
    }
    let (_, _, i) = best.unwrap();
    let (_, classes, p) = &heads[i];
    let mut k = 0;
    for j in 1..classes.len() {
        if p[j] > p[k] {
            k = j;
        }
    }
    classes[k]
}

#[test]
fn prediction_rule_matches_brute_force_oracle() {
    let mut g = rng::seeded(31);
    for _ in 0..2000 {
        let t = 1 + rng::below(&mut g, 4);
        let mut next = 0u32;
        let mut heads = Vec::new();
        for task in 1..=t as u32 {
            let c = 1 + rng::below(&mut g, 3);
            let classes: Vec<ClassId> = (next..next + c as u32).map(ClassId).collect();
            next += c as u32;
            heads.push((task, classes, random_row(&mut g, c + 1)));
        }
        let mut order: Vec<usize> = (0..t).collect();
        rng::shuffle(&mut g, &mut order);
        let outputs: Vec<HeadOutput> = order.iter().map(|&i| out(heads[i].0, &heads[i].1, &heads[i].2)).collect();
        let pred = select_prediction(&outputs).unwrap();
        assert_eq!(pred.class, brute_force(&heads));
        let owner = heads.iter().find(|h| h.1.contains(&pred.class)).unwrap();
        assert_eq!(pred.task, TaskId(owner.0));
    }
}

#[test]
fn head_forward_matches_closed_form() {
    let mut g = rng::seeded(32);
    let head = TaskHead::new(TaskId(1), ids(&[4, 5, 6]), 5, true, &mut g).unwrap();
    let x = Tensor::randn(&[3, 5], 1.0, &mut g);
    let p = head.forward(&x).unwrap();
    let (w, b) = (head.linear.weight.data(), head.linear.bias.data());
    for n in 0..3 {
        let logits: Vec<f64> = (0..4)
            .map(|o| b[o] + (0..5).map(|d| w[o * 5 + d] * x.data()[n * 5 + d]).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let row = &p.data()[n * 4..(n + 1) * 4];
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for o in 0..4 {
            let expect = logits[o].exp() / z;
            assert!((row[o] - expect).abs() / expect < 1e-9);
        }
    }
}

#[test]
fn zero_head_is_uniform_and_saturated_others_dominates() {
    let zero = TaskHead::from_parts(TaskId(1), ids(&[0, 1]), true, Tensor::zeros(&[3, 4]), Tensor::zeros(&[3])).unwrap();
    let p = zero.forward(&Tensor::filled(&[2, 4], 0.3)).unwrap();
    assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    let saturated = TaskHead::from_parts(TaskId(1), ids(&[0, 1]), true, Tensor::zeros(&[3, 4]), Tensor::new(&[3], vec![0.0, 0.0, 50.0]).unwrap()).unwrap();
    assert!(saturated.forward(&Tensor::filled(&[1, 4], 0.3)).unwrap().data()[2] > 1.0 - 1e-15);
}

#[test]
fn map_labels_matches_dictionary_oracle() {
    let mut g = rng::seeded(33);
    let head = TaskHead::new(TaskId(3), ids(&[4, 5]), 2, true, &mut g).unwrap();
    assert_eq!(head.map_labels(&ids(&[4, 5, 4]), &ids(&[0, 1, 4, 5])).unwrap(), vec![0, 1, 0]);
    assert_eq!(head.map_labels(&ids(&[0, 1]), &ids(&[0, 1, 4, 5])).unwrap(), vec![2, 2]);
    let learned = ids(&[0, 1, 2, 3, 4, 5, 6]);
    let oracle: HashMap<ClassId, usize> = learned.iter().map(|&c| (c, if c == ClassId(4) { 0 } else if c == ClassId(5) { 1 } else { 2 })).collect();
    for _ in 0..200 {
        let batch: Vec<ClassId> = (0..1 + rng::below(&mut g, 12)).map(|_| learned[rng::below(&mut g, learned.len())]).collect();
        let expect: Vec<usize> = batch.iter().map(|c| oracle[c]).collect();
        assert_eq!(head.map_labels(&batch, &learned).unwrap(), expect);
    }
    assert_eq!(head.map_labels(&ids(&[9]), &learned), Err(Error::UnknownClass(ClassId(9))));
}

#[test]
fn suppressed_others_reduces_to_plain_argmax() {
    let mut g = rng::seeded(34);
    let mut head = TaskHead::new(TaskId(1), ids(&[0, 1, 2]), 4, true, &mut g).unwrap();
    let mut bias = head.linear.bias.data().to_vec();
    bias[3] = -1e6;
    head.linear.bias.assign(&Tensor::new(&[4], bias).unwrap()).unwrap();
    let x = Tensor::randn(&[50, 4], 1.0, &mut g);
    let p = head.forward(&x).unwrap();
    for row in p.data().chunks_exact(4) {
        let pred = select_prediction(&[HeadOutput { task: TaskId(1), classes: head.classes(), probabilities: row, others: Some(3) }]).unwrap();
        let plain = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
        assert_eq!(pred.class, ClassId(plain as u32));
    }
}
