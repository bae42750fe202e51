use acl_core::backbone::{pretrain_backbone, Backbone, BackboneConfig, PretrainConfig};
use acl_core::data::LabeledSet;
use acl_core::layers::Linear;
use acl_core::ops;
use acl_core::optim::{zero_grad, Optimizer, OptimizerConfig};
use acl_core::rng;
use acl_core::synthetic::{generate_synthetic, SyntheticSpec};
use acl_core::{ClassId, Error, Tensor};

fn four_class() -> (LabeledSet, LabeledSet) {
    let d = generate_synthetic(&SyntheticSpec::new(4, 100, 20, [1, 16, 16]), 0).unwrap();
    (d.train, d.test)
}

fn targets(set: &LabeledSet) -> Vec<usize> {
    set.labels().iter().map(|c| c.0 as usize).collect()
}

fn flat(set: &LabeledSet) -> Tensor {
    Tensor::new(&[set.len(), set.pixels().len() / set.len()], set.pixels().to_vec()).unwrap()
}

#[test]
fn same_seed_same_bytes() {
    let spec = SyntheticSpec::new(3, 5, 2, [2, 8, 8]);
    assert_eq!(generate_synthetic(&spec, 9).unwrap(), generate_synthetic(&spec, 9).unwrap());
    assert_ne!(generate_synthetic(&spec, 9).unwrap(), generate_synthetic(&spec, 10).unwrap());
}

#[test]
fn train_and_test_never_share_an_image() {
    let (train, test) = four_class();
    for i in 0..test.len() {
        assert!((0..train.len()).all(|j| train.image(j) != test.image(i)));
    }
    assert_eq!(train.classes(), test.classes());
}

#[test]
fn degenerate_specs_are_rejected() {
    assert!(matches!(generate_synthetic(&SyntheticSpec::new(1, 5, 5, [1, 8, 8]), 0), Err(Error::Config(_))));
    assert!(matches!(generate_synthetic(&SyntheticSpec::new(3, 5, 5, [1, 0, 8]), 0), Err(Error::Shape { .. })));
}

#[test]
fn linear_probe_on_pixels_fails_where_a_small_cnn_succeeds() {
    let (train, test) = four_class();
    let (x, y) = (flat(&train), targets(&train));
    let mut g = rng::seeded(1);
    let mut probe = Linear::new("probe", x.shape()[1], 4, &mut g);
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.01, 0.0)).unwrap();
    for _ in 0..300 {
        let ce = ops::softmax_cross_entropy(&probe.forward(&x).unwrap(), &y).unwrap();
        let d = ops::softmax_cross_entropy_backward(&ce.probabilities, &y).unwrap();
        probe.backward(&x, &d).unwrap();
        let mut params = probe.params_mut();
        opt.step(&mut params).unwrap();
        zero_grad(&mut params);
    }
    let logits = probe.forward(&flat(&test)).unwrap();
    let hits = logits
        .data()
        .chunks_exact(4)
        .zip(targets(&test))
        .filter(|(row, t)| ops::argmax(row) == *t)
        .count();
    let linear_accuracy = hits as f64 / test.len() as f64;
    assert!(linear_accuracy <= 0.70, "linear probe reached {linear_accuracy}");

    let mut backbone = Backbone::new(BackboneConfig::standard(1, 16, &[8, 16, 32]), &mut g).unwrap();
    let config = PretrainConfig {
        min_accuracy: 0.95,
        ..PretrainConfig::default()
    };
    let report = pretrain_backbone(&mut backbone, &train, &test, &config, &mut g).unwrap();
    assert!(report.held_out_accuracy >= 0.95);
    assert!(backbone.is_frozen());
    assert!(test.labels().iter().all(|c| *c < ClassId(4)));
}
