//! Procedural image classes: oriented gratings with a random phase per sample,
//! clutter blobs and pixel noise. The random phase makes every class mean close to
//! zero, so raw pixels are not linearly separable, while oriented filters followed
//! by rectification and pooling separate the classes easily.
//!
//! Class `k` uses orientation bucket `k / 2` and one of two spatial frequencies
//! (`k % 2`), so consecutive class pairs differ only in frequency.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::ids::ClassId;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    /// Training images are rotated by a uniform angle in `[-max, max]` degrees.
    #[serde(default)]
    pub max_rotation_degrees: f64,
    /// Bilinear resize of every image to `[height, width]`, after rotation.
    #[serde(default)]
    pub resize: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// `[C, H, W]` before augmentation.
    pub image_shape: [usize; 3],
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_clutter")]
    pub clutter_blobs: usize,
    /// Orientation jitter, degrees.
    #[serde(default = "default_jitter")]
    pub orientation_jitter: f64,
    #[serde(default)]
    pub augmentation: Augmentation,
}

fn default_noise() -> f64 {
    0.2
}

fn default_clutter() -> usize {
    0
}

fn default_jitter() -> f64 {
    4.0
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, train_per_class: usize, test_per_class: usize, image_shape: [usize; 3]) -> Self {
        Self {
            num_classes,
            train_per_class,
            test_per_class,
            image_shape,
            noise_std: default_noise(),
            clutter_blobs: default_clutter(),
            orientation_jitter: default_jitter(),
            augmentation: Augmentation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_shape;
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.num_classes > 256 {
            return Err(Error::Config("synthetic data supports at most 256 classes".into()));
        }
        if c == 0 || h < 4 || w < 4 {
            return Err(Error::Shape {
                op: "generate_synthetic",
                reason: alloc::format!("degenerate image shape {:?}", self.image_shape),
            });
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("every class needs train and test samples".into()));
        }
        if let Some([rh, rw]) = self.augmentation.resize {
            if rh == 0 || rw == 0 {
                return Err(Error::Shape {
                    op: "generate_synthetic",
                    reason: "resize target must be positive".into(),
                });
            }
        }
        Ok(())
    }

    pub fn output_shape(&self) -> [usize; 3] {
        match self.augmentation.resize {
            Some([h, w]) => [self.image_shape[0], h, w],
            None => self.image_shape,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ClassPattern {
    orientation: f64,
    frequency: f64,
}

fn class_pattern(class: usize, num_classes: usize) -> ClassPattern {
    let buckets = num_classes.div_ceil(2);
    ClassPattern {
        orientation: (class / 2) as f64 * PI / buckets as f64,
        frequency: if class.is_multiple_of(2) { 0.11 } else { 0.21 },
    }
}

fn render(spec: &SyntheticSpec, pattern: ClassPattern, rng: &mut Rng) -> Vec<f64> {
    let [c, h, w] = spec.image_shape;
    let theta = pattern.orientation + spec.orientation_jitter.to_radians() * rng::normal(rng);
    let freq = pattern.frequency * (1.0 + 0.05 * rng::normal(rng));
    let phase = 2.0 * PI * rng::uniform(rng);
    let amplitude = 0.7 + 0.6 * rng::uniform(rng);
    let (sin_t, cos_t) = (libm::sin(theta), libm::cos(theta));
    let blobs: Vec<(f64, f64, f64, f64)> = (0..spec.clutter_blobs)
        .map(|_| {
            (
                rng::uniform(rng) * h as f64,
                rng::uniform(rng) * w as f64,
                1.0 + 0.15 * (h.min(w) as f64) * rng::uniform(rng),
                if rng::uniform(rng) < 0.5 { -1.0 } else { 1.0 },
            )
        })
        .collect();
    let mut plane = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let t = x as f64 * cos_t + y as f64 * sin_t;
            let mut v = amplitude * libm::sin(2.0 * PI * freq * t + phase);
            for &(by, bx, r, sign) in &blobs {
                let (dy, dx) = (y as f64 - by, x as f64 - bx);
                let d2 = dy * dy + dx * dx;
                v += sign * 0.8 * libm::exp(-d2 / (2.0 * r * r));
            }
            plane[y * w + x] = v;
        }
    }
    let mut image = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let gain = 1.0 - 0.2 * ch as f64 / c as f64;
        image.extend(plane.iter().map(|v| gain * v + spec.noise_std * rng::normal(rng)));
    }
    image
}

/// Samples bilinearly with zero outside the image.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (libm::floor(y), libm::floor(x));
    let (dy, dx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    at(y0, x0) * (1.0 - dy) * (1.0 - dx)
        + at(y0, x0 + 1.0) * (1.0 - dy) * dx
        + at(y0 + 1.0, x0) * dy * (1.0 - dx)
        + at(y0 + 1.0, x0 + 1.0) * dy * dx
}

/// Rotates every channel of a `[C, H, W]` image about its centre.
pub fn rotate(image: &[f64], shape: [usize; 3], degrees: f64) -> Vec<f64> {
    let [c, h, w] = shape;
    let (s, co) = (libm::sin(degrees.to_radians()), libm::cos(degrees.to_radians()));
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(image.len());
    for plane in image.chunks_exact(h * w).take(c) {
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sy = co * dy - s * dx + cy;
                let sx = s * dy + co * dx + cx;
                out.push(bilinear(plane, h, w, sy, sx));
            }
        }
    }
    out
}

/// Bilinear resize of a `[C, H, W]` image to `[C, new_h, new_w]` (align-corners).
pub fn resize(image: &[f64], shape: [usize; 3], new_h: usize, new_w: usize) -> Vec<f64> {
    let [c, h, w] = shape;
    let scale = |n: usize, m: usize| if m > 1 { (n as f64 - 1.0) / (m as f64 - 1.0) } else { 0.0 };
    let (sy, sx) = (scale(h, new_h), scale(w, new_w));
    let mut out = Vec::with_capacity(c * new_h * new_w);
    for plane in image.chunks_exact(h * w).take(c) {
        for y in 0..new_h {
            for x in 0..new_w {
                let (fy, fx) = (y as f64 * sy, x as f64 * sx);
                let (y0, x0) = (fy as usize, fx as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
                let v = plane[y0 * w + x0] * (1.0 - dy) * (1.0 - dx)
                    + plane[y0 * w + x1] * (1.0 - dy) * dx
                    + plane[y1 * w + x0] * dy * (1.0 - dx)
                    + plane[y1 * w + x1] * dy * dx;
                out.push(v);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Deterministic per seed. Class ids are `0..num_classes`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let mut root = rng::seeded(seed);
    let out_shape = spec.output_shape();
    let mut train = LabeledSet::empty(out_shape);
    let mut test = LabeledSet::empty(out_shape);
    for class in 0..spec.num_classes {
        let pattern = class_pattern(class, spec.num_classes);
        let mut class_rng = rng::fork(&mut root);
        for (set, count, is_train) in [(&mut train, spec.train_per_class, true), (&mut test, spec.test_per_class, false)] {
            for _ in 0..count {
                let mut image = render(spec, pattern, &mut class_rng);
                let max = spec.augmentation.max_rotation_degrees;
                if is_train && max > 0.0 {
                    let angle = (2.0 * rng::uniform(&mut class_rng) - 1.0) * max;
                    image = rotate(&image, spec.image_shape, angle);
                }
                if let Some([rh, rw]) = spec.augmentation.resize {
                    image = resize(&image, spec.image_shape, rh, rw);
                }
                set.push(&image, ClassId(class as u32))?;
            }
        }
    }
    Ok(SyntheticData { train, test })
}
