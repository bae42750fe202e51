//! Task-specific residual adapters inserted between backbone stages.
//!
//! An adapter maps a stage output `z` to `alpha * up(upsample(relu(down(z)))) + z`.
//! `down` is a stride-2 3×3 convolution narrowing the channels by the bottleneck
//! ratio, `upsample` is nearest-neighbour 2×, and `up` is a 3×3 convolution that
//! restores the channel count. `alpha` starts at zero, so a fresh adapter is the
//! identity.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::TaskId;
use crate::layers::Conv2d;
use crate::ops;
use crate::rng::Rng;
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Channel reduction of the down-convolution (`C -> C / ratio`).
    pub bottleneck_ratio: usize,
    pub kernel: usize,
    /// One flag per gap `1..K-1`; `None` enables every gap.
    #[serde(default)]
    pub gap_mask: Option<Vec<bool>>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            bottleneck_ratio: 4,
            kernel: 3,
            gap_mask: None,
        }
    }
}

impl AdapterConfig {
    pub fn gap_enabled(&self, gap: usize) -> bool {
        match &self.gap_mask {
            Some(mask) => mask.get(gap - 1).copied().unwrap_or(false),
            None => true,
        }
    }

    pub fn validate(&self, gaps: usize) -> Result<()> {
        if self.bottleneck_ratio == 0 {
            return Err(Error::Config("adapter bottleneck_ratio must be positive".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config("adapter kernel must be odd".into()));
        }
        if let Some(mask) = &self.gap_mask {
            if mask.len() != gaps {
                return Err(Error::Config(format!(
                    "adapter gap_mask has {} entries, backbone has {gaps} gaps",
                    mask.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    gap: usize,
    pub down: Conv2d,
    pub up: Conv2d,
    pub alpha: Parameter,
}

/// Intermediate values kept by [`Adapter::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct AdapterCache {
    input: Tensor,
    hidden: Tensor,
    upsampled: Tensor,
    branch: Tensor,
}

impl Adapter {
    pub fn new(task: TaskId, gap: usize, channels: usize, config: &AdapterConfig, rng: &mut Rng) -> Self {
        let hidden = (channels / config.bottleneck_ratio).max(1);
        let pad = config.kernel / 2;
        let prefix = format!("adapter.t{}.gap{gap}", task.0);
        Self {
            gap,
            down: Conv2d::new(&format!("{prefix}.down"), channels, hidden, config.kernel, 2, pad, rng),
            up: Conv2d::new(&format!("{prefix}.up"), hidden, channels, config.kernel, 1, pad, rng),
            alpha: Parameter::zeros(format!("{prefix}.alpha"), &[1]),
        }
    }

    pub fn gap(&self) -> usize {
        self.gap
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.data()[0]
    }

    fn check_input(&self, z: &Tensor) -> Result<()> {
        let [_, c, h, w] = z.dims4("adapter")?;
        if c != self.down.in_channels() {
            return Err(Error::Dimension {
                op: "adapter",
                axis: "channels",
                expected: self.down.in_channels(),
                actual: c,
            });
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape {
                op: "adapter",
                reason: format!("odd spatial size {h}x{w} at gap {}", self.gap),
            });
        }
        Ok(())
    }

    fn branch(&self, z: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_input(z)?;
        let hidden = ops::relu(&self.down.forward(z)?);
        let upsampled = ops::upsample_nearest2x(&hidden)?;
        let branch = self.up.forward(&upsampled)?;
        Ok((hidden, upsampled, branch))
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (_, _, branch) = self.branch(z)?;
        Ok(residual(z, &branch, self.alpha()))
    }

    pub fn forward_cached(&self, z: Tensor) -> Result<(Tensor, AdapterCache)> {
        let (hidden, upsampled, branch) = self.branch(&z)?;
        let out = residual(&z, &branch, self.alpha());
        Ok((
            out,
            AdapterCache {
                input: z,
                hidden,
                upsampled,
                branch,
            },
        ))
    }

    /// Accumulates gradients for `down`, `up` and `alpha`; returns the gradient
    /// with respect to `z` when `want_input` is set.
    pub fn backward(&mut self, cache: AdapterCache, grad_out: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        let d_alpha: f64 = grad_out
            .data()
            .iter()
            .zip(cache.branch.data())
            .map(|(g, b)| g * b)
            .sum();
        self.alpha.accumulate_grad(&[d_alpha])?;
        let alpha = self.alpha();
        let mut d_branch = grad_out.clone();
        d_branch.data_mut().iter_mut().for_each(|g| *g *= alpha);
        let d_upsampled = self
            .up
            .backward(&cache.upsampled, &d_branch, true)?
            .expect("input gradient requested");
        let d_hidden = ops::upsample_nearest2x_backward(&d_upsampled)?;
        let d_pre = ops::relu_backward(&cache.hidden, &d_hidden)?;
        let d_input = self.down.backward(&cache.input, &d_pre, want_input)?;
        Ok(match d_input {
            Some(mut d) => {
                d.add_assign(grad_out)?;
                Some(d)
            }
            None => None,
        })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = Vec::with_capacity(5);
        p.extend(self.down.params());
        p.extend(self.up.params());
        p.push(&self.alpha);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = Vec::with_capacity(5);
        p.extend(self.down.params_mut());
        p.extend(self.up.params_mut());
        p.push(&mut self.alpha);
        p
    }
}

fn residual(z: &Tensor, branch: &Tensor, alpha: f64) -> Tensor {
    let mut out = z.clone();
    out.set_requires_grad(false);
    out.data_mut()
        .iter_mut()
        .zip(branch.data())
        .for_each(|(o, b)| *o += alpha * b);
    out
}

/// The adapters of one task, one per enabled gap, sorted by gap.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    task: TaskId,
    adapters: Vec<Adapter>,
}

impl AdapterSet {
    /// Builds adapters for every enabled gap. `gap_channels[k - 1]` is the channel
    /// count of stage output `z_k`.
    pub fn new(task: TaskId, gap_channels: &[usize], config: &AdapterConfig, rng: &mut Rng) -> Self {
        let adapters = gap_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| (i + 1, c))
            .filter(|&(gap, _)| config.gap_enabled(gap))
            .map(|(gap, c)| Adapter::new(task, gap, c, config, rng))
            .collect();
        Self { task, adapters }
    }

    /// A set with no adapters: every gap passes `z_k` through unchanged.
    pub fn identity(task: TaskId) -> Self {
        Self {
            task,
            adapters: Vec::new(),
        }
    }

    pub fn from_adapters(task: TaskId, mut adapters: Vec<Adapter>) -> Self {
        adapters.sort_by_key(|a| a.gap);
        Self { task, adapters }
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn get(&self, gap: usize) -> Option<&Adapter> {
        self.adapters.iter().find(|a| a.gap == gap)
    }

    pub fn get_mut(&mut self, gap: usize) -> Option<&mut Adapter> {
        self.adapters.iter_mut().find(|a| a.gap == gap)
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| p.is_frozen())
    }

    pub fn freeze(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::freeze);
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.adapters.iter().flat_map(Adapter::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.adapters.iter_mut().flat_map(Adapter::params_mut).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        for a in &mut self.adapters {
            a.alpha.value_mut().data_mut()[0] = alpha;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn adapter(channels: usize, seed: u64) -> Adapter {
        Adapter::new(TaskId(1), 1, channels, &AdapterConfig::default(), &mut rng::seeded(seed))
    }

    #[test]
    fn zero_alpha_is_identity() {
        let a = adapter(8, 1);
        let z = Tensor::randn(&[2, 8, 6, 6], 1.0, &mut rng::seeded(2));
        assert_eq!(a.forward(&z).unwrap().data(), z.data());
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero() {
        let mut a = adapter(4, 3);
        a.alpha.value_mut().data_mut()[0] = 0.7;
        let z = Tensor::zeros(&[1, 4, 4, 4]);
        assert!(a.forward(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_input() {
        let mut a = adapter(8, 4);
        a.alpha.value_mut().data_mut()[0] = 0.5;
        let z = Tensor::randn(&[3, 8, 10, 4], 1.0, &mut rng::seeded(5));
        assert_eq!(a.forward(&z).unwrap().shape(), z.shape());
    }

    #[test]
    fn odd_spatial_size_is_rejected() {
        let a = adapter(4, 6);
        let z = Tensor::zeros(&[1, 4, 5, 4]);
        assert!(matches!(a.forward(&z), Err(Error::Shape { .. })));
    }

    #[test]
    fn gap_mask_limits_adapters() {
        let config = AdapterConfig {
            gap_mask: Some(alloc::vec![false, true]),
            ..AdapterConfig::default()
        };
        let set = AdapterSet::new(TaskId(2), &[8, 16], &config, &mut rng::seeded(0));
        assert!(set.get(1).is_none());
        assert_eq!(set.get(2).unwrap().down.in_channels(), 16);
    }
}
