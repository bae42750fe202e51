//! Kernels checked against direct loop implementations.

use acl_core::ops;
use acl_core::optim::{Optimizer, OptimizerConfig};
use acl_core::rng::{self, Rng};
use acl_core::{Parameter, Tensor};

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn direct_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = x.dims4("x").unwrap();
    let [f, _, kh, kw] = w.dims4("w").unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for i in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[o];
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((i * c + ch) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((o * c + ch) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((i * f + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng::seeded(11);
    for &(c, f, h, w, k, stride, pad) in &[
        (1, 4, 7, 7, 3, 1, 1),
        (3, 2, 8, 6, 3, 2, 1),
        (2, 5, 5, 5, 1, 1, 0),
        (4, 3, 9, 9, 5, 2, 2),
        (2, 2, 6, 6, 3, 1, 0),
    ] {
        let x = randn(&[2, c, h, w], &mut r);
        let wt = randn(&[f, c, k, k], &mut r);
        let b = randn(&[f], &mut r);
        let got = ops::conv2d(&x, &wt, &b, stride, pad).unwrap();
        assert!(max_rel(got.data(), &direct_conv(&x, &wt, &b, stride, pad)) < 1e-6);
    }
}

#[test]
fn linear_matches_naive_matmul() {
    let mut r = rng::seeded(12);
    let (n, d, o) = (5, 7, 4);
    let x = randn(&[n, d], &mut r);
    let w = randn(&[o, d], &mut r);
    let b = randn(&[o], &mut r);
    let got = ops::linear(&x, &w, &b).unwrap();
    for i in 0..n {
        for j in 0..o {
            let expect: f64 = b.data()[j] + (0..d).map(|k| x.data()[i * d + k] * w.data()[j * d + k]).sum::<f64>();
            assert!((got.data()[i * o + j] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }
}

#[test]
fn cross_entropy_matches_closed_form() {
    let logits = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 0.5, -0.5, 0.0]).unwrap();
    let ce = ops::softmax_cross_entropy(&logits, &[2, 0]).unwrap();
    let row = |a: f64, b: f64, c: f64, t: f64| -(t - (a.exp() + b.exp() + c.exp()).ln());
    let expect = (row(1.0, 2.0, 3.0, 3.0) + row(0.5, -0.5, 0.0, 0.5)) / 2.0;
    assert!((ce.loss - expect).abs() < 1e-9);
    let p = ce.probabilities.data();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    assert!((p[0] - 1f64.exp() / z).abs() < 1e-12);
}

#[test]
fn cross_entropy_survives_large_logits() {
    let logits = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
    let ce = ops::softmax_cross_entropy(&logits, &[1]).unwrap();
    assert!((ce.loss - 1000.0).abs() < 1e-9);
}

#[test]
fn sgd_trajectory_matches_reference_loop() {
    let cfg = OptimizerConfig::sgd(0.1, 0.9, 0.01);
    let mut opt = Optimizer::new(cfg).unwrap();
    let mut p = Parameter::new("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
    let grads = [[0.5, 1.0], [-0.25, 0.75], [0.1, -0.3]];
    let (mut w, mut v) = ([1.0f64, -2.0], [0.0f64; 2]);
    for g in grads {
        p.accumulate_grad(&g).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        p.zero_grad();
        for i in 0..2 {
            let gi = g[i] + 0.01 * w[i];
            v[i] = 0.9 * v[i] + gi;
            w[i] -= 0.1 * v[i];
        }
    }
    for i in 0..2 {
        assert!((p.data()[i] - w[i]).abs() < 1e-12);
    }
}

#[test]
fn adam_trajectory_matches_reference_loop() {
    let mut opt = Optimizer::new(OptimizerConfig::adam(0.01, 0.0)).unwrap();
    let mut p = Parameter::new("w", Tensor::new(&[1], vec![0.3]).unwrap());
    let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
    for (t, g) in [0.2, -0.4, 0.1, 0.05].into_iter().enumerate() {
        p.accumulate_grad(&[g]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        p.zero_grad();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let k = (t + 1) as i32;
        w -= 0.01 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
    }
    assert!((p.data()[0] - w).abs() < 1e-12);
}

#[test]
fn pooling_and_upsampling_by_hand() {
    let x = Tensor::new(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]).unwrap();
    let (pooled, _) = ops::max_pool2d(&x, 2).unwrap();
    assert_eq!(pooled.data(), &[5.0, 7.0]);
    assert_eq!(ops::global_avg_pool(&x).unwrap().data(), &[21.0 / 8.0]);
    let up = ops::upsample_nearest2x(&pooled).unwrap();
    assert_eq!(up.shape(), &[1, 1, 2, 4]);
    assert_eq!(up.data(), &[5.0, 5.0, 7.0, 7.0, 5.0, 5.0, 7.0, 7.0]);
}
