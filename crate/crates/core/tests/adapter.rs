use acl_core::adapter::{Adapter, AdapterConfig, AdapterSet};
use acl_core::backbone::{Backbone, BackboneConfig};
use acl_core::rng;
use acl_core::{Error, TaskId, Tensor};

#[test]
fn zero_alpha_reproduces_plain_backbone_features() {
    let mut g = rng::seeded(41);
    let backbone = Backbone::new(BackboneConfig::standard(1, 16, &[8, 16, 32]), &mut g).unwrap();
    let adapters = AdapterSet::new(TaskId(1), &backbone.gap_channels(), &AdapterConfig::default(), &mut g);
    assert!(adapters.adapters().iter().all(|a| a.alpha() == 0.0));
    let x = Tensor::randn(&[4, 1, 16, 16], 1.0, &mut g);
    let plain = backbone.forward_from(0, &x, None).unwrap();
    let tuned = backbone.forward_from(0, &x, Some(&adapters)).unwrap();
    for (a, b) in plain.data().iter().zip(tuned.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn pointwise_adapter_matches_hand_computation() {
    let config = AdapterConfig {
        bottleneck_ratio: 4,
        kernel: 1,
        gap_mask: None,
    };
    let mut adapter = Adapter::new(TaskId(1), 1, 4, &config, &mut rng::seeded(0));
    let wd = [0.5, -1.0, 0.25, 2.0];
    let wu = [1.0, -0.5, 3.0, 0.1];
    let (bd, bu, alpha) = (0.1, [0.0, 0.2, -0.3, 0.4], 0.75);
    adapter.down.weight.assign(&Tensor::new(&[1, 4, 1, 1], wd.to_vec()).unwrap()).unwrap();
    adapter.down.bias.assign(&Tensor::new(&[1], vec![bd]).unwrap()).unwrap();
    adapter.up.weight.assign(&Tensor::new(&[4, 1, 1, 1], wu.to_vec()).unwrap()).unwrap();
    adapter.up.bias.assign(&Tensor::new(&[4], bu.to_vec()).unwrap()).unwrap();
    adapter.alpha.assign(&Tensor::scalar(alpha)).unwrap();

    let mut g = rng::seeded(42);
    let z = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut g);
    let at = |c: usize, y: usize, x: usize| z.data()[(c * 4 + y) * 4 + x];
    let got = adapter.forward(&z).unwrap();
    for c in 0..4 {
        for y in 0..4 {
            for x in 0..4 {
                let (sy, sx) = (2 * (y / 2), 2 * (x / 2));
                let hidden = (bd + (0..4).map(|k| wd[k] * at(k, sy, sx)).sum::<f64>()).max(0.0);
                let expect = at(c, y, x) + alpha * (wu[c] * hidden + bu[c]);
                assert!((got.data()[(c * 4 + y) * 4 + x] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn odd_spatial_size_is_rejected() {
    let adapter = Adapter::new(TaskId(1), 1, 4, &AdapterConfig::default(), &mut rng::seeded(0));
    let err = adapter.forward(&Tensor::zeros(&[1, 4, 5, 5])).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err:?}");
}

#[test]
fn adapters_are_small_next_to_the_backbone() {
    let mut g = rng::seeded(43);
    let backbone = Backbone::new(BackboneConfig::default(), &mut g).unwrap();
    let adapters = AdapterSet::new(TaskId(1), &backbone.gap_channels(), &AdapterConfig::default(), &mut g);
    let ratio = adapters.parameter_count() as f64 / backbone.parameter_count() as f64;
    assert!(ratio < 0.10, "adapter/backbone parameter ratio {ratio}");
}

#[test]
fn gap_mask_limits_adapters() {
    let config = AdapterConfig {
        gap_mask: Some(vec![false, true]),
        ..AdapterConfig::default()
    };
    let set = AdapterSet::new(TaskId(2), &[8, 16], &config, &mut rng::seeded(1));
    assert_eq!(set.adapters().len(), 1);
    assert_eq!(set.adapters()[0].gap(), 2);
    assert!(set.get(1).is_none());
}
