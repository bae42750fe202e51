//! Parameter-holding wrappers around the kernels in [`crate::ops`].

use alloc::format;
use alloc::string::String;

use crate::error::Result;
use crate::ops;
use crate::rng::Rng;
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Parameter::he_normal(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: Parameter::zeros(format!("{name}.bias"), &[out_channels]),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        ops::conv2d(input, self.weight.value(), self.bias.value(), self.stride, self.padding)
    }

    /// Accumulates parameter gradients (unless frozen) and returns the input
    /// gradient when `want_input` is set.
    pub fn backward(&mut self, input: &Tensor, grad_out: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        let want_params = !self.weight.is_frozen() || !self.bias.is_frozen();
        let grads = ops::conv2d_backward(
            input,
            self.weight.value(),
            self.stride,
            self.padding,
            grad_out,
            want_input,
            want_params,
        )?;
        if let Some(w) = grads.weight {
            self.weight.accumulate_grad(&w)?;
        }
        if let Some(b) = grads.bias {
            self.bias.accumulate_grad(&b)?;
        }
        Ok(grads.input)
    }

    pub fn rename(&mut self, name: &str) {
        self.weight.set_name(format!("{name}.weight"));
        self.bias.set_name(format!("{name}.bias"));
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Parameter::he_normal(
                format!("{name}.weight"),
                &[out_features, in_features],
                in_features,
                rng,
            ),
            bias: Parameter::zeros(format!("{name}.bias"), &[out_features]),
        }
    }

    pub fn from_parts(name: &str, weight: Tensor, bias: Tensor) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), bias),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        ops::linear(input, self.weight.value(), self.bias.value())
    }

    pub fn backward(&mut self, input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        let grads = ops::linear_backward(input, self.weight.value(), grad_out)?;
        self.weight.accumulate_grad(&grads.weight)?;
        self.bias.accumulate_grad(&grads.bias)?;
        Ok(grads.input)
    }

    pub fn name_prefix(&self) -> String {
        self.weight
            .name()
            .strip_suffix(".weight")
            .unwrap_or(self.weight.name())
            .into()
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
