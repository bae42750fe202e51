//! The staged convolutional feature extractor shared by every task.
//!
//! Stages are numbered `1..=K`; stage outputs `z_1..z_{K-1}` are the gaps where
//! task adapters may be inserted. After the last stage a global average pool
//! yields the feature vector.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterCache, AdapterSet};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::ids::ClassId;
use crate::layers::{Conv2d, Linear};
use crate::ops;
use crate::optim::{zero_grad, Optimizer, OptimizerConfig};
use crate::rng::{self, Rng};
use crate::tensor::{checksum, Checksum, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub layers: Vec<LayerSpec>,
}

impl StageSpec {
    /// `conv3x3 - relu - conv3x3 - relu - maxpool2`.
    pub fn standard(out_channels: usize) -> Self {
        let conv = LayerSpec::Conv {
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        Self {
            layers: vec![conv, LayerSpec::Relu, conv, LayerSpec::Relu, LayerSpec::MaxPool { size: 2 }],
        }
    }

    /// Channel count of the stage output, given its input channel count.
    pub fn out_channels(&self, in_channels: usize) -> usize {
        self.layers
            .iter()
            .fold(in_channels, |c, layer| match layer {
                LayerSpec::Conv { out_channels, .. } => *out_channels,
                _ => c,
            })
    }

    /// Nominal spatial reduction factor of the stage.
    pub fn spatial_downsample(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| match layer {
                LayerSpec::Conv { stride, .. } => *stride,
                LayerSpec::MaxPool { size } => *size,
                LayerSpec::Relu => 1,
            })
            .product()
    }

    /// Output `[C, H, W]` for an input `[C, H, W]`, or `None` if a layer does not fit.
    pub fn output_shape(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        self.layers.iter().try_fold(input, |[c, h, w], layer| match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => Some([
                out_channels,
                ops::conv_out_extent(h, kernel, stride, padding)?,
                ops::conv_out_extent(w, kernel, stride, padding)?,
            ]),
            LayerSpec::Relu => Some([c, h, w]),
            LayerSpec::MaxPool { size } => {
                (size > 0 && size <= h && size <= w).then_some([c, h / size, w / size])
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stages: Vec<StageSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::standard(1, 32, &[16, 32, 64])
    }
}

impl BackboneConfig {
    /// Square input, one [`StageSpec::standard`] stage per entry of `channels`.
    pub fn standard(in_channels: usize, size: usize, channels: &[usize]) -> Self {
        Self {
            in_channels,
            input_height: size,
            input_width: size,
            stages: channels.iter().map(|&c| StageSpec::standard(c)).collect(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.input_height, self.input_width]
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// `[C, H, W]` of every stage output, validating the whole chain.
    pub fn stage_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.stages.len() < 2 {
            return Err(Error::Config(format!(
                "backbone needs at least 2 stages, got {}",
                self.stages.len()
            )));
        }
        let mut shape = self.input_shape();
        if shape.contains(&0) {
            return Err(Error::Config(format!("degenerate input shape {shape:?}")));
        }
        let mut shapes = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            shape = stage.output_shape(shape).ok_or_else(|| {
                Error::Config(format!("stage {} does not fit input {shape:?}", i + 1))
            })?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        Ok(self.stage_shapes()?.last().expect("at least two stages")[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool(usize),
}

#[derive(Debug, Clone)]
enum LayerCache {
    Conv(Tensor),
    Relu(Tensor),
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub layers: Vec<Layer>,
}

impl Stage {
    fn build(index: usize, spec: &StageSpec, mut in_channels: usize, rng: &mut Rng) -> Self {
        let mut conv_index = 0;
        let layers = spec
            .layers
            .iter()
            .map(|layer| match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    conv_index += 1;
                    let name = format!("backbone.stage{index}.conv{conv_index}");
                    let conv = Conv2d::new(&name, in_channels, out_channels, kernel, stride, padding, rng);
                    in_channels = out_channels;
                    Layer::Conv(conv)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { size } => Layer::MaxPool(size),
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x: Option<Tensor> = None;
        for layer in &self.layers {
            let cur = x.as_ref().unwrap_or(input);
            x = Some(match layer {
                Layer::Conv(conv) => conv.forward(cur)?,
                Layer::Relu => ops::relu(cur),
                Layer::MaxPool(size) => ops::max_pool2d(cur, *size)?.0,
            });
        }
        Ok(x.unwrap_or_else(|| input.clone()))
    }

    fn forward_cached(&self, input: Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(conv) => {
                    let y = conv.forward(&x)?;
                    caches.push(LayerCache::Conv(x));
                    y
                }
                Layer::Relu => {
                    let y = ops::relu(&x);
                    caches.push(LayerCache::Relu(y.clone()));
                    y
                }
                Layer::MaxPool(size) => {
                    let (y, argmax) = ops::max_pool2d(&x, *size)?;
                    caches.push(LayerCache::MaxPool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    });
                    y
                }
            };
        }
        Ok((x, caches))
    }

    fn backward(&mut self, caches: Vec<LayerCache>, grad: Tensor, want_input: bool) -> Result<Option<Tensor>> {
        // need[i]: the gradient at the input of layer i is consumed upstream.
        let mut need = Vec::with_capacity(self.layers.len());
        let mut upstream = want_input;
        for layer in &self.layers {
            need.push(upstream);
            upstream |= matches!(layer, Layer::Conv(c) if !c.weight.is_frozen() || !c.bias.is_frozen());
        }
        let mut grad = grad;
        for ((layer, cache), need) in self.layers.iter_mut().zip(caches).zip(need).rev() {
            grad = match (layer, cache) {
                (Layer::Conv(conv), LayerCache::Conv(input)) => match conv.backward(&input, &grad, need)? {
                    Some(g) => g,
                    None => return Ok(None),
                },
                _ if !need => return Ok(None),
                (Layer::Relu, LayerCache::Relu(output)) => ops::relu_backward(&output, &grad)?,
                (Layer::MaxPool(_), LayerCache::MaxPool { input_shape, argmax }) => {
                    ops::max_pool2d_backward(&input_shape, &argmax, &grad)?
                }
                _ => unreachable!("cache recorded by the same layer sequence"),
            };
        }
        Ok(want_input.then_some(grad))
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    fn is_frozen(&self) -> bool {
        self.convs().all(|c| c.weight.is_frozen() && c.bias.is_frozen())
    }
}

/// Per-stage outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    /// `z_1..z_{K-1}`, the raw stage outputs before any adapter is applied.
    pub intermediates: Vec<Tensor>,
    pub feature: Tensor,
}

/// Everything recorded by [`Backbone::forward_traced`].
#[derive(Debug)]
pub struct BackboneTrace {
    start: usize,
    stages: Vec<Vec<LayerCache>>,
    adapters: Vec<Option<AdapterCache>>,
    pooled_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        let shapes = config.stage_shapes()?;
        let mut in_channels = config.in_channels;
        let stages = config
            .stages
            .iter()
            .zip(&shapes)
            .enumerate()
            .map(|(i, (spec, shape))| {
                let stage = Stage::build(i + 1, spec, in_channels, rng);
                in_channels = shape[0];
                stage
            })
            .collect();
        Ok(Self { config, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Number of stages `K`.
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim().expect("validated at construction")
    }

    /// Channel count of each gap output `z_1..z_{K-1}`.
    pub fn gap_channels(&self) -> Vec<usize> {
        let shapes = self.config.stage_shapes().expect("validated at construction");
        shapes[..shapes.len() - 1].iter().map(|s| s[0]).collect()
    }

    fn check_input(&self, x: &Tensor, stage: usize) -> Result<()> {
        let expected = if stage == 0 {
            self.config.input_shape()
        } else {
            self.config.stage_shapes()?[stage - 1]
        };
        let [_, c, h, w] = x.dims4("backbone")?;
        for (axis, want, got) in [("channels", expected[0], c), ("height", expected[1], h), ("width", expected[2], w)] {
            if want != got {
                return Err(Error::Dimension {
                    op: "backbone",
                    axis,
                    expected: want,
                    actual: got,
                });
            }
        }
        Ok(())
    }

    /// Plain or adapter-tapped forward. With taps, gap `k` feeds
    /// `A_k(z_k) + z_k` into stage `k + 1`.
    pub fn forward_stages(&self, x: &Tensor, taps: Option<&AdapterSet>) -> Result<StageOutputs> {
        self.check_input(x, 0)?;
        let k = self.stages.len();
        let mut intermediates = Vec::with_capacity(k - 1);
        let mut h = self.stages[0].forward(x)?;
        for gap in 1..k {
            let tapped = match taps.and_then(|t| t.get(gap)) {
                Some(adapter) => adapter.forward(&h)?,
                None => h.clone(),
            };
            intermediates.push(h);
            h = self.stages[gap].forward(&tapped)?;
        }
        Ok(StageOutputs {
            intermediates,
            feature: ops::global_avg_pool(&h)?,
        })
    }

    /// Output of stage 1, `z_1`. It does not depend on any task, so callers may cache it.
    pub fn stem(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, 0)?;
        self.stages[0].forward(x)
    }

    /// Feature vector for an input entering at `start`: 0 means raw images, `k >= 1`
    /// means `z_k` (the adapter at gap `k` is applied first).
    pub fn forward_from(&self, start: usize, input: &Tensor, taps: Option<&AdapterSet>) -> Result<Tensor> {
        self.check_input(input, start)?;
        let mut h: Option<Tensor> = None;
        for s in start..self.stages.len() {
            let cur = h.as_ref().unwrap_or(input);
            let tapped = match (s, taps.and_then(|t| t.get(s))) {
                (1.., Some(adapter)) => Some(adapter.forward(cur)?),
                _ => None,
            };
            h = Some(self.stages[s].forward(tapped.as_ref().unwrap_or(cur))?);
        }
        ops::global_avg_pool(h.as_ref().unwrap_or(input))
    }

    pub fn forward_traced(
        &self,
        start: usize,
        input: Tensor,
        taps: Option<&AdapterSet>,
    ) -> Result<(Tensor, BackboneTrace)> {
        self.check_input(&input, start)?;
        let k = self.stages.len();
        let mut trace = BackboneTrace {
            start,
            stages: Vec::with_capacity(k - start),
            adapters: Vec::with_capacity(k - start),
            pooled_shape: Vec::new(),
        };
        let mut h = input;
        for s in start..k {
            let adapter = if s >= 1 { taps.and_then(|t| t.get(s)) } else { None };
            match adapter {
                Some(a) => {
                    let (out, cache) = a.forward_cached(h)?;
                    trace.adapters.push(Some(cache));
                    h = out;
                }
                None => trace.adapters.push(None),
            }
            let (out, caches) = self.stages[s].forward_cached(h)?;
            trace.stages.push(caches);
            h = out;
        }
        trace.pooled_shape = h.shape().to_vec();
        Ok((ops::global_avg_pool(&h)?, trace))
    }

    /// Backpropagates a feature gradient through the recorded pass, accumulating
    /// into every non-frozen backbone and adapter parameter reached.
    pub fn backward(
        &mut self,
        trace: BackboneTrace,
        grad_feature: &Tensor,
        mut taps: Option<&mut AdapterSet>,
    ) -> Result<()> {
        let start = trace.start;
        let k = self.stages.len();
        let adapter_trainable = |taps: &Option<&mut AdapterSet>, gap: usize| {
            gap >= 1
                && taps
                    .as_ref()
                    .and_then(|t| t.get(gap))
                    .is_some_and(|a| a.params().iter().any(|p| !p.is_frozen()))
        };
        // trainable_upto[i]: something trainable sits at position i or earlier,
        // where stage s has position 2s+1 and the adapter feeding it 2s.
        let mut trainable_upto = vec![false; 2 * k + 1];
        let mut seen = false;
        for s in start..k {
            seen |= adapter_trainable(&taps, s);
            trainable_upto[2 * s] = seen;
            seen |= !self.stages[s].is_frozen();
            trainable_upto[2 * s + 1] = seen;
        }
        let mut grad = ops::global_avg_pool_backward(&trace.pooled_shape, grad_feature)?;
        let stage_caches = trace.stages.into_iter().rev();
        let adapter_caches = trace.adapters.into_iter().rev();
        for ((s, caches), adapter_cache) in (start..k).rev().zip(stage_caches).zip(adapter_caches) {
            let want = trainable_upto[2 * s];
            if !trainable_upto[2 * s + 1] {
                break;
            }
            match self.stages[s].backward(caches, grad, want)? {
                Some(g) => grad = g,
                None => break,
            }
            if let Some(cache) = adapter_cache {
                let want = s > start && trainable_upto[2 * s - 1];
                let adapter = taps
                    .as_mut()
                    .and_then(|t| t.get_mut(s))
                    .expect("trace recorded an adapter at this gap");
                match adapter.backward(cache, &grad, want)? {
                    Some(g) => grad = g,
                    None => break,
                }
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.stages
            .iter()
            .flat_map(|s| s.convs().flat_map(|c| c.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.convs_mut().flat_map(|c| c.params_mut()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn freeze(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::freeze);
    }

    pub fn unfreeze(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::unfreeze);
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|p| p.is_frozen())
    }

    pub fn checksum(&self) -> Checksum {
        checksum(self.params())
    }

    /// Features for a whole set, computed in batches.
    pub fn features(&self, set: &LabeledSet, taps: Option<&AdapterSet>, batch: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (0..set.len()).collect();
        let mut out = Vec::with_capacity(set.len() * self.feature_dim());
        for chunk in idx.chunks(batch.max(1)) {
            let x = set.batch(chunk)?;
            out.extend_from_slice(self.forward_from(0, &x, taps)?.data());
        }
        Tensor::new(&[set.len(), self.feature_dim()], out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Held-out accuracy the pretrained backbone must reach.
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerConfig::sgd(0.01, 0.9, 5e-4).with_decay_at(&[20], 0.1),
            min_accuracy: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs: usize,
    pub final_train_loss: f64,
    pub held_out_accuracy: f64,
}

/// Trains the backbone with a temporary linear head on the base classes, then
/// freezes it. The head is discarded. Fails if the held-out accuracy stays
/// below `config.min_accuracy`; the backbone is frozen either way.
pub fn pretrain_backbone(
    backbone: &mut Backbone,
    train: &LabeledSet,
    held_out: &LabeledSet,
    config: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    if train.is_empty() {
        return Err(Error::Empty("base training set"));
    }
    let classes = train.classes();
    let local = |c: ClassId| classes.binary_search(&c).map_err(|_| Error::UnknownClass(c));
    let mut head = Linear::new("pretrain.head", backbone.feature_dim(), classes.len(), rng);
    backbone.unfreeze();
    let mut optimizer = Optimizer::new(config.optimizer.clone())?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        optimizer.set_epoch(epoch);
        rng::shuffle(rng, &mut order);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let x = train.batch(batch)?;
            let targets = batch
                .iter()
                .map(|&i| local(train.label(i)))
                .collect::<Result<Vec<_>>>()?;
            let (feature, trace) = backbone.forward_traced(0, x, None)?;
            let logits = head.forward(&feature)?;
            let ce = ops::softmax_cross_entropy(&logits, &targets)?;
            total += ce.loss * batch.len() as f64;
            let d_logits = ops::softmax_cross_entropy_backward(&ce.probabilities, &targets)?;
            let d_feature = head.backward(&feature, &d_logits)?;
            backbone.backward(trace, &d_feature, None)?;
            let mut params = backbone.params_mut();
            params.extend(head.params_mut());
            optimizer.step(&mut params)?;
            zero_grad(&mut params);
        }
        final_loss = total / train.len() as f64;
        if !final_loss.is_finite() {
            return Err(Error::NonFinite("pretraining loss"));
        }
    }
    backbone.freeze();
    let accuracy = if held_out.is_empty() {
        0.0
    } else {
        let logits = head.forward(&backbone.features(held_out, None, 64)?)?;
        let width = classes.len();
        let correct = logits
            .data()
            .chunks_exact(width)
            .zip(held_out.labels())
            .filter(|(row, &label)| local(label).is_ok_and(|t| ops::argmax(row) == t))
            .count();
        correct as f64 / held_out.len() as f64
    };
    if accuracy < config.min_accuracy {
        return Err(Error::PretrainFailed {
            achieved: accuracy,
            required: config.min_accuracy,
        });
    }
    Ok(PretrainReport {
        epochs: config.epochs,
        final_train_loss: final_loss,
        held_out_accuracy: accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stage_shapes() {
        let shapes = BackboneConfig::default().stage_shapes().unwrap();
        assert_eq!(shapes, vec![[16, 16, 16], [32, 8, 8], [64, 4, 4]]);
    }

    #[test]
    fn three_stage_on_16x16_gives_two_maps_and_a_vector() {
        let config = BackboneConfig::standard(1, 16, &[4, 8, 12]);
        let b = Backbone::new(config, &mut rng::seeded(1)).unwrap();
        let x = Tensor::randn(&[1, 1, 16, 16], 1.0, &mut rng::seeded(2));
        let out = b.forward_stages(&x, None).unwrap();
        assert_eq!(out.intermediates.len(), 2);
        assert_eq!(out.intermediates[0].shape(), &[1, 4, 8, 8]);
        assert_eq!(out.intermediates[1].shape(), &[1, 8, 4, 4]);
        assert_eq!(out.feature.shape(), &[1, 12]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let b = Backbone::new(BackboneConfig::standard(1, 16, &[4, 8]), &mut rng::seeded(1)).unwrap();
        let x = Tensor::zeros(&[1, 2, 16, 16]);
        assert!(matches!(
            b.forward_stages(&x, None),
            Err(Error::Dimension { axis: "channels", .. })
        ));
    }

    #[test]
    fn rejects_single_stage_and_oversized_pooling() {
        assert!(BackboneConfig::standard(1, 16, &[4]).stage_shapes().is_err());
        assert!(BackboneConfig::standard(1, 4, &[4, 4, 4]).stage_shapes().is_err());
    }

    #[test]
    fn forward_from_stem_matches_full_forward() {
        let b = Backbone::new(BackboneConfig::standard(1, 16, &[4, 8, 8]), &mut rng::seeded(3)).unwrap();
        let x = Tensor::randn(&[2, 1, 16, 16], 1.0, &mut rng::seeded(4));
        let full = b.forward_stages(&x, None).unwrap().feature;
        let z1 = b.stem(&x).unwrap();
        assert_eq!(b.forward_from(1, &z1, None).unwrap(), full);
        assert_eq!(b.forward_from(0, &x, None).unwrap(), full);
    }
}
