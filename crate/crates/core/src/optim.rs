//! SGD with momentum and Adam, both with L2 weight decay and a multi-step
//! learning-rate schedule.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// A milestone: from epoch index `epoch` (0-based) on, the rate is multiplied by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Milestone {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// SGD only.
    #[serde(default)]
    pub momentum: f64,
    /// Adam only.
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub schedule: Vec<Milestone>,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            weight_decay,
            momentum,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            schedule: Vec::new(),
        }
    }

    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(learning_rate, 0.0, weight_decay)
        }
    }

    pub fn with_decay_at(mut self, epochs: &[usize], factor: f64) -> Self {
        self.schedule = epochs.iter().map(|&epoch| Milestone { epoch, factor }).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if self.schedule.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err(Error::Config("schedule epochs must be strictly increasing".into()));
        }
        if self.schedule.iter().any(|m| !(m.factor > 0.0 && m.factor.is_finite())) {
            return Err(Error::Config("schedule factors must be positive".into()));
        }
        let (momentum, beta1, beta2, epsilon) = (self.momentum, self.beta1, self.beta2, self.epsilon);
        match self.kind {
            OptimizerKind::SgdMomentum if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")))
            }
            OptimizerKind::Adam
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 =>
            {
                Err(Error::Config("adam betas must lie in [0, 1) and epsilon be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// Learning rate in effect during epoch `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|m| m.epoch <= epoch)
            .fold(self.learning_rate, |lr, m| lr * m.factor)
    }
}

/// Optimizer state. Slots are positional: callers must pass the same parameter
/// list, in the same order, on every step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    learning_rate: f64,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            learning_rate: config.learning_rate,
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.learning_rate = self.config.learning_rate_at(epoch);
    }

    /// Applies one update to every non-frozen parameter. Frozen parameters are skipped
    /// without being read or written.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if self.first.len() < params.len() {
            for p in &params[self.first.len()..] {
                self.first.push(vec![0.0; p.numel()]);
                self.second.push(vec![0.0; p.numel()]);
            }
        }
        for p in params.iter() {
            if !p.is_frozen() && p.grad().is_none() {
                return Err(Error::MissingGradient { name: p.name().into() });
            }
        }
        self.steps += 1;
        let lr = self.learning_rate;
        let wd = self.config.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            if p.is_frozen() {
                continue;
            }
            let grad: Vec<f64> = p
                .grad()
                .expect("checked above")
                .iter()
                .zip(p.data())
                .map(|(g, w)| g + wd * w)
                .collect();
            let values = p.value_mut().data_mut();
            let c = &self.config;
            let (momentum, beta1, beta2, epsilon) = (c.momentum, c.beta1, c.beta2, c.epsilon);
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    let velocity = &mut self.first[i];
                    for ((w, v), g) in values.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.steps as i32;
                    let c1 = 1.0 - libm::pow(beta1, t as f64);
                    let c2 = 1.0 - libm::pow(beta2, t as f64);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (((w, m), v), g) in values.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grad) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (libm::sqrt(v_hat) + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn zero_grad(params: &mut [&mut Parameter]) {
    params.iter_mut().for_each(|p| p.zero_grad());
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(w: f64, g: f64) -> Parameter {
        let mut p = Parameter::new("w", Tensor::scalar(w));
        p.accumulate_grad(&[g]).unwrap();
        p
    }

    #[test]
    fn plain_sgd_single_step() {
        let mut p = scalar_param(1.0, 1.0);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0, 0.0)).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut p = scalar_param(0.123456789, 1.0);
        let before = p.data()[0].to_bits();
        p.freeze();
        for config in [OptimizerConfig::sgd(0.1, 0.9, 0.1), OptimizerConfig::adam(0.1, 0.1)] {
            let mut opt = Optimizer::new(config).unwrap();
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(p.data()[0].to_bits(), before);
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Parameter::new("lonely", Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0, 0.0)).unwrap();
        assert_eq!(
            opt.step(&mut [&mut p]),
            Err(Error::MissingGradient { name: "lonely".into() })
        );
    }

    #[test]
    fn schedule_applies_milestones() {
        let c = OptimizerConfig::sgd(0.01, 0.9, 5e-4).with_decay_at(&[70, 100, 130], 0.1);
        assert_eq!(c.learning_rate_at(0), 0.01);
        assert_eq!(c.learning_rate_at(69), 0.01);
        assert!((c.learning_rate_at(70) - 1e-3).abs() < 1e-18);
        assert!((c.learning_rate_at(199) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(OptimizerConfig::sgd(0.0, 0.9, 0.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 0.9, -1.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 0.9, 0.0)
            .with_decay_at(&[5, 5], 0.1)
            .validate()
            .is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = scalar_param(1.0, 3.0);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.001, 0.0)).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - (1.0 - 0.001)).abs() < 1e-9);
    }
}
