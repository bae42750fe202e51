//! Central finite-difference checks (ε = 1e-5) of every differentiable op and of
//! the composed adapter + head stack.

use acl_core::adapter::{Adapter, AdapterConfig, AdapterSet};
use acl_core::backbone::{Backbone, BackboneConfig};
use acl_core::engine::multi_head_loss;
use acl_core::gradcheck::finite_difference_check;
use acl_core::heads::TaskHead;
use acl_core::ids::{ClassId, TaskId};
use acl_core::layers::Linear;
use acl_core::ops;
use acl_core::rng::{self, Rng};
use acl_core::{Parameter, Result, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn weighted_sum(t: &Tensor, r: &Tensor) -> f64 {
    t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn check(name: &str, f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], analytic: &[f64]) {
    let report = finite_difference_check(f, x, analytic, EPS).unwrap();
    assert!(
        report.max_relative_error < TOL,
        "{name}: relative error {:.3e} at {}",
        report.max_relative_error,
        report.worst_index
    );
}

fn flat(params: &[&Parameter]) -> Vec<f64> {
    params.iter().flat_map(|p| p.data().iter().copied()).collect()
}

fn flat_grad(params: &[&Parameter]) -> Vec<f64> {
    params.iter().flat_map(|p| p.grad().unwrap().iter().copied()).collect()
}

fn load(params: Vec<&mut Parameter>, values: &[f64]) {
    let mut offset = 0;
    for p in params {
        let n = p.numel();
        let t = Tensor::new(p.value().shape(), values[offset..offset + n].to_vec()).unwrap();
        p.assign(&t).unwrap();
        offset += n;
    }
}

fn input(shape: &[usize], r: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

#[test]
fn conv2d_gradients() {
    let mut r = rng::seeded(1);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        let x = input(&[2, 3, 6, 6], &mut r);
        let w = input(&[4, 3, k, k], &mut r);
        let b = input(&[4], &mut r);
        let out = ops::conv2d(&x, &w, &b, stride, pad).unwrap();
        let rw = input(out.shape(), &mut r);
        let g = ops::conv2d_backward(&x, &w, stride, pad, &rw, true, true).unwrap();
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| ops::conv2d(x, w, b, stride, pad).map(|o| weighted_sum(&o, &rw));
        check("conv input", |v| loss(&Tensor::new(x.shape(), v.to_vec())?, &w, &b), x.data(), g.input.unwrap().data());
        check("conv weight", |v| loss(&x, &Tensor::new(w.shape(), v.to_vec())?, &b), w.data(), &g.weight.unwrap());
        check("conv bias", |v| loss(&x, &w, &Tensor::new(b.shape(), v.to_vec())?), b.data(), &g.bias.unwrap());
    }
}

#[test]
fn linear_gradients() {
    let mut r = rng::seeded(2);
    let x = input(&[3, 5], &mut r);
    let w = input(&[4, 5], &mut r);
    let b = input(&[4], &mut r);
    let rw = input(&[3, 4], &mut r);
    let g = ops::linear_backward(&x, &w, &rw).unwrap();
    let loss = |x: &Tensor, w: &Tensor, b: &Tensor| ops::linear(x, w, b).map(|o| weighted_sum(&o, &rw));
    check("linear input", |v| loss(&Tensor::new(&[3, 5], v.to_vec())?, &w, &b), x.data(), g.input.data());
    check("linear weight", |v| loss(&x, &Tensor::new(&[4, 5], v.to_vec())?, &b), w.data(), &g.weight);
    check("linear bias", |v| loss(&x, &w, &Tensor::new(&[4], v.to_vec())?), b.data(), &g.bias);
}

#[test]
fn elementwise_and_pooling_gradients() {
    let mut r = rng::seeded(3);
    let x = input(&[2, 2, 4, 4], &mut r);

    let out = ops::relu(&x);
    let rw = input(out.shape(), &mut r);
    let g = ops::relu_backward(&out, &rw).unwrap();
    check("relu", |v| Ok(weighted_sum(&ops::relu(&Tensor::new(x.shape(), v.to_vec())?), &rw)), x.data(), g.data());

    let (out, argmax) = ops::max_pool2d(&x, 2).unwrap();
    let rw = input(out.shape(), &mut r);
    let g = ops::max_pool2d_backward(x.shape(), &argmax, &rw).unwrap();
    check("max_pool2d", |v| Ok(weighted_sum(&ops::max_pool2d(&Tensor::new(x.shape(), v.to_vec())?, 2)?.0, &rw)), x.data(), g.data());

    let out = ops::global_avg_pool(&x).unwrap();
    let rw = input(out.shape(), &mut r);
    let g = ops::global_avg_pool_backward(x.shape(), &rw).unwrap();
    check("global_avg_pool", |v| Ok(weighted_sum(&ops::global_avg_pool(&Tensor::new(x.shape(), v.to_vec())?)?, &rw)), x.data(), g.data());

    let out = ops::upsample_nearest2x(&x).unwrap();
    let rw = input(out.shape(), &mut r);
    let g = ops::upsample_nearest2x_backward(&rw).unwrap();
    check("upsample", |v| Ok(weighted_sum(&ops::upsample_nearest2x(&Tensor::new(x.shape(), v.to_vec())?)?, &rw)), x.data(), g.data());
}

#[test]
fn softmax_cross_entropy_gradient() {
    let mut r = rng::seeded(4);
    let logits = input(&[4, 5], &mut r);
    let targets = [0, 4, 2, 2];
    let ce = ops::softmax_cross_entropy(&logits, &targets).unwrap();
    let g = ops::softmax_cross_entropy_backward(&ce.probabilities, &targets).unwrap();
    check(
        "softmax_cross_entropy",
        |v| Ok(ops::softmax_cross_entropy(&Tensor::new(&[4, 5], v.to_vec())?, &targets)?.loss),
        logits.data(),
        g.data(),
    );
}

#[test]
fn adapter_gradients() {
    let mut r = rng::seeded(5);
    let mut adapter = Adapter::new(TaskId(1), 1, 8, &AdapterConfig::default(), &mut r);
    adapter.alpha.assign(&Tensor::scalar(0.7)).unwrap();
    let z = input(&[2, 8, 4, 4], &mut r);
    let rw = input(&[2, 8, 4, 4], &mut r);
    let (_, cache) = adapter.forward_cached(z.clone()).unwrap();
    let mut trained = adapter.clone();
    let dz = trained.backward(cache, &rw, true).unwrap().unwrap();
    check("adapter input", |v| Ok(weighted_sum(&adapter.forward(&Tensor::new(z.shape(), v.to_vec())?)?, &rw)), z.data(), dz.data());
    let params = flat(&adapter.params());
    let grads = flat_grad(&trained.params());
    check(
        "adapter params",
        |v| {
            let mut a = adapter.clone();
            load(a.params_mut(), v);
            Ok(weighted_sum(&a.forward(&z)?, &rw))
        },
        &params,
        &grads,
    );
}

fn stack_setup() -> (Backbone, AdapterSet, TaskHead, Tensor, Vec<usize>) {
    let mut r = rng::seeded(6);
    let backbone = Backbone::new(BackboneConfig::standard(1, 8, &[4, 8, 8]), &mut r).unwrap();
    let mut adapters = AdapterSet::new(TaskId(1), &backbone.gap_channels(), &AdapterConfig::default(), &mut r);
    adapters.set_alpha(0.5);
    let head = TaskHead::new(TaskId(1), vec![ClassId(0), ClassId(1)], backbone.feature_dim(), true, &mut r).unwrap();
    let x = input(&[3, 1, 8, 8], &mut r);
    (backbone, adapters, head, x, vec![0, 2, 1])
}

fn stack_loss(backbone: &Backbone, adapters: &AdapterSet, head: &TaskHead, z1: &Tensor, targets: &[usize]) -> Result<f64> {
    let feature = backbone.forward_from(1, z1, Some(adapters))?;
    Ok(ops::softmax_cross_entropy(&head.logits(&feature)?, targets)?.loss)
}

#[test]
fn adapter_and_head_stack_gradients() {
    let (mut backbone, mut adapters, mut head, x, targets) = stack_setup();
    backbone.freeze();
    let z1 = backbone.stem(&x).unwrap();
    let (feature, trace) = backbone.forward_traced(1, z1.clone(), Some(&adapters)).unwrap();
    let ce = ops::softmax_cross_entropy(&head.logits(&feature).unwrap(), &targets).unwrap();
    let d_logits = ops::softmax_cross_entropy_backward(&ce.probabilities, &targets).unwrap();
    let d_feature = head.linear.backward(&feature, &d_logits).unwrap();
    let (frozen_backbone, base_adapters, base_head) = (backbone.clone(), adapters.clone(), head.clone());
    backbone.backward(trace, &d_feature, Some(&mut adapters)).unwrap();
    assert!(backbone.params().iter().all(|p| p.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0))));

    check(
        "stack adapters",
        |v| {
            let mut a = base_adapters.clone();
            load(a.params_mut(), v);
            stack_loss(&frozen_backbone, &a, &base_head, &z1, &targets)
        },
        &flat(&base_adapters.params()),
        &flat_grad(&adapters.params()),
    );
    check(
        "stack head",
        |v| {
            let mut h = base_head.clone();
            load(h.params_mut().into_iter().collect(), v);
            stack_loss(&frozen_backbone, &base_adapters, &h, &z1, &targets)
        },
        &flat(&base_head.params()),
        &flat_grad(&head.params()),
    );
}

#[test]
fn backbone_gradients_when_trainable() {
    let (mut backbone, _, _, x, _) = stack_setup();
    let mut r = rng::seeded(7);
    let mut head = Linear::new("probe", backbone.feature_dim(), 3, &mut r);
    let targets = [1, 0, 2];
    let (feature, trace) = backbone.forward_traced(0, x.clone(), None).unwrap();
    let ce = ops::softmax_cross_entropy(&head.forward(&feature).unwrap(), &targets).unwrap();
    let d = ops::softmax_cross_entropy_backward(&ce.probabilities, &targets).unwrap();
    let d_feature = head.backward(&feature, &d).unwrap();
    let base = backbone.clone();
    backbone.backward(trace, &d_feature, None).unwrap();
    let probe = head.clone();
    check(
        "backbone",
        |v| {
            let mut b = base.clone();
            load(b.params_mut(), v);
            let f = b.forward_from(0, &x, None)?;
            Ok(ops::softmax_cross_entropy(&probe.forward(&f)?, &targets)?.loss)
        },
        &flat(&base.params()),
        &flat_grad(&backbone.params()),
    );
}

#[test]
fn multi_head_loss_gradient() {
    let mut r = rng::seeded(8);
    let learned: Vec<ClassId> = (0..5).map(ClassId).collect();
    let heads: Vec<TaskHead> = vec![
        TaskHead::new(TaskId(1), vec![ClassId(0), ClassId(1)], 6, true, &mut r).unwrap(),
        TaskHead::new(TaskId(2), vec![ClassId(2), ClassId(3)], 6, true, &mut r).unwrap(),
        TaskHead::new(TaskId(3), vec![ClassId(4)], 6, true, &mut r).unwrap(),
    ];
    let features: Vec<Tensor> = (0..3).map(|_| input(&[5, 6], &mut r)).collect();
    let labels = learned.clone();
    let mut trained = heads.clone();
    {
        let mut refs: Vec<&mut TaskHead> = trained.iter_mut().collect();
        multi_head_loss(&mut refs, &features, &labels, &learned, true).unwrap();
    }
    let all = |hs: &[TaskHead]| -> Vec<f64> { hs.iter().flat_map(|h| flat(&h.params())).collect() };
    let grads: Vec<f64> = trained.iter().flat_map(|h| flat_grad(&h.params())).collect();
    check(
        "multi-head loss",
        |v| {
            let mut hs = heads.clone();
            let mut offset = 0;
            for h in &mut hs {
                let n: usize = h.params().iter().map(|p| p.numel()).sum();
                load(h.params_mut().into_iter().collect(), &v[offset..offset + n]);
                offset += n;
            }
            let mut refs: Vec<&mut TaskHead> = hs.iter_mut().collect();
            Ok(multi_head_loss(&mut refs, &features, &labels, &learned, false)?.total)
        },
        &all(&heads),
        &grads,
    );
}
