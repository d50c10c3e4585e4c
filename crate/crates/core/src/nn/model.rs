//! The patch classifier: convolutional blocks (conv, ReLU, batch norm,
//! 2x2 max pool) followed by a sigmoid MLP with a single output unit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::activation::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
use crate::nn::batchnorm::{BatchNorm, BatchNormCache, BatchNormConfig};
use crate::nn::conv::{Conv2d, ConvCache};
use crate::nn::dense::Dense;
use crate::nn::pool::{maxpool2_backward, maxpool2_forward};
use crate::nn::{Scalar, Tensor};

/// Placement of batch norm relative to the sigmoid in hidden MLP layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpOrder {
    #[default]
    SigmoidThenBn,
    BnThenSigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub in_channels: usize,
    /// Side of the square input patch.
    pub input_size: usize,
    pub conv_widths: Vec<usize>,
    pub hidden: Vec<usize>,
    pub mlp_order: MlpOrder,
    /// Without it every batch-norm layer is left out.
    pub use_batch_norm: bool,
    pub batch_norm: BatchNormConfig,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::full_size()
    }
}

impl Architecture {
    /// 2x40x40 input, conv widths 24/48/96, hidden layers 1200/600.
    pub fn full_size() -> Self {
        Architecture {
            in_channels: 2,
            input_size: 40,
            conv_widths: vec![24, 48, 96],
            hidden: vec![1200, 600],
            mlp_order: MlpOrder::SigmoidThenBn,
            use_batch_norm: true,
            batch_norm: BatchNormConfig::default(),
        }
    }

    /// Same layer types at toy scale: 2x8x8 input, widths 4/8/16.
    pub fn thumbnail() -> Self {
        Architecture {
            in_channels: 2,
            input_size: 8,
            conv_widths: vec![4, 8, 16],
            hidden: vec![12, 6],
            mlp_order: MlpOrder::SigmoidThenBn,
            use_batch_norm: true,
            batch_norm: BatchNormConfig::default(),
        }
    }

    pub fn is_full_size(&self) -> bool {
        let t = Architecture::full_size();
        self.in_channels == t.in_channels
            && self.input_size == t.input_size
            && self.conv_widths == t.conv_widths
            && self.hidden == t.hidden
            && self.use_batch_norm
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.conv_widths.len() as u32;
        let div = 1usize << blocks;
        if self.in_channels == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::InvalidConfig(format!(
                "input size {} must be a positive multiple of {div}",
                self.input_size
            )));
        }
        if self.conv_widths.iter().chain(&self.hidden).any(|&w| w == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Length of the flattened feature vector fed to the MLP.
    pub fn flat_features(&self) -> usize {
        let side = self.input_size >> self.conv_widths.len();
        self.conv_widths.last().copied().unwrap_or(self.in_channels) * side * side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S> {
    Conv(Conv2d<S>),
    Relu,
    BatchNorm(BatchNorm<S>),
    MaxPool,
    Flatten,
    Dense(Dense<S>),
    Sigmoid,
}

impl<S> Layer<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::BatchNorm(_) => "bn",
            Layer::MaxPool => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
            Layer::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache<S> {
    Conv(ConvCache<S>),
    Relu(Tensor<S>),
    BatchNorm(BatchNormCache<S>),
    MaxPool { argmax: Vec<u32>, input_shape: Vec<usize> },
    Flatten(Vec<usize>),
    Dense(Tensor<S>),
    Sigmoid(Tensor<S>),
}

/// Saved activations of one train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    generation: u64,
    batch: usize,
    layers: Vec<LayerCache<S>>,
}

/// Parameter gradients, aligned with [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn add_assign(&mut self, other: &Gradients<S>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    arch: Architecture,
    layers: Vec<Layer<S>>,
    seed: u64,
    /// Bumped whenever parameters may have changed; invalidates caches.
    generation: u64,
}

impl<S: Scalar> Model<S> {
    /// Builds the layer chain with zero weights and default batch-norm state.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::new();
        let mut ch = arch.in_channels;
        for &w in &arch.conv_widths {
            layers.push(Layer::Conv(Conv2d::zeros(ch, w)));
            layers.push(Layer::Relu);
            if arch.use_batch_norm {
                layers.push(Layer::BatchNorm(BatchNorm::new(w, arch.batch_norm)));
            }
            layers.push(Layer::MaxPool);
            ch = w;
        }
        layers.push(Layer::Flatten);
        let mut width = arch.flat_features();
        for &h in &arch.hidden {
            layers.push(Layer::Dense(Dense::zeros(width, h)));
            if arch.use_batch_norm {
                let bn = Layer::BatchNorm(BatchNorm::new(h, arch.batch_norm));
                match arch.mlp_order {
                    MlpOrder::SigmoidThenBn => layers.extend([Layer::Sigmoid, bn]),
                    MlpOrder::BnThenSigmoid => layers.extend([bn, Layer::Sigmoid]),
                }
            } else {
                layers.push(Layer::Sigmoid);
            }
            width = h;
        }
        layers.push(Layer::Dense(Dense::zeros(width, 1)));
        layers.push(Layer::Sigmoid);
        Ok(Model {
            arch: arch.clone(),
            layers,
            seed: 0,
            generation: 0,
        })
    }

    /// He-normal conv weights, Xavier-uniform dense weights, zero biases.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut model = Model::zeros(arch)?;
        model.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            match layer {
                Layer::Conv(conv) => {
                    let fan_in = conv.in_channels() * 9;
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .expect("positive std");
                    for w in conv.weight.data_mut() {
                        *w = S::from_f64(normal.sample(&mut rng));
                    }
                }
                Layer::Dense(dense) => {
                    let limit = (6.0 / (dense.inputs() + dense.outputs()) as f64).sqrt();
                    let uniform = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                    for w in dense.weight.data_mut() {
                        *w = S::from_f64(uniform.sample(&mut rng));
                    }
                }
                _ => {}
            }
        }
        Ok(model)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        let a = &self.arch;
        [batch, a.in_channels, a.input_size, a.input_size]
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<usize> {
        let n = x.shape().first().copied().unwrap_or(0);
        x.expect_shape(&self.input_shape(n))?;
        Ok(n)
    }

    /// Trainable tensors in a fixed order: per layer, conv/dense weight and
    /// bias, batch-norm gamma and beta.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                Layer::Dense(d) => out.extend([&d.weight, &d.bias]),
                Layer::BatchNorm(b) => out.extend([&b.gamma, &b.beta]),
                _ => {}
            }
        }
        out
    }

    /// Mutable access to the trainable tensors; invalidates forward caches.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.generation += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
                Layer::BatchNorm(b) => out.extend([&mut b.gamma, &mut b.beta]),
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Every persisted tensor (parameters and running statistics) with a
    /// stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("{i}.conv.weight"), &c.weight));
                    out.push((format!("{i}.conv.bias"), &c.bias));
                }
                Layer::Dense(d) => {
                    out.push((format!("{i}.dense.weight"), &d.weight));
                    out.push((format!("{i}.dense.bias"), &d.bias));
                }
                Layer::BatchNorm(b) => {
                    out.push((format!("{i}.bn.gamma"), &b.gamma));
                    out.push((format!("{i}.bn.beta"), &b.beta));
                    out.push((format!("{i}.bn.running_mean"), &b.running_mean));
                    out.push((format!("{i}.bn.running_var"), &b.running_var));
                }
                _ => {}
            }
        }
        out
    }

    pub(crate) fn persisted_tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.generation += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
                Layer::BatchNorm(b) => out.extend([
                    &mut b.gamma,
                    &mut b.beta,
                    &mut b.running_mean,
                    &mut b.running_var,
                ]),
                _ => {}
            }
        }
        out
    }

    /// Train-mode forward: batch statistics in batch norm (running
    /// statistics are updated) and a cache for [`Model::backward`].
    /// Returns one probability per sample.
    pub fn forward_train(&mut self, x: &Tensor<S>) -> Result<(Vec<S>, ForwardCache<S>)> {
        let batch = self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Conv(conv) => {
                    let (y, c) = conv.forward(&h)?;
                    (y, LayerCache::Conv(c))
                }
                Layer::Relu => (relu_forward(&h), LayerCache::Relu(h)),
                Layer::BatchNorm(bn) => {
                    let (y, c) = bn.forward_train(&h)?;
                    (y, LayerCache::BatchNorm(c))
                }
                Layer::MaxPool => {
                    let (y, argmax) = maxpool2_forward(&h)?;
                    let input_shape = h.shape().to_vec();
                    (y, LayerCache::MaxPool { argmax, input_shape })
                }
                Layer::Flatten => {
                    let shape = h.shape().to_vec();
                    let flat: usize = shape[1..].iter().product();
                    (h.reshape(&[batch, flat])?, LayerCache::Flatten(shape))
                }
                Layer::Dense(d) => (d.forward(&h)?, LayerCache::Dense(h)),
                Layer::Sigmoid => {
                    let y = sigmoid_forward(&h);
                    (y.clone(), LayerCache::Sigmoid(y))
                }
            };
            caches.push(cache);
            h = next;
        }
        Ok((
            h.into_data(),
            ForwardCache {
                generation: self.generation,
                batch,
                layers: caches,
            },
        ))
    }

    /// Eval-mode forward; a pure function of weights, running statistics
    /// and input.
    ///
    /// The convolutional blocks run one sample at a time so their
    /// activations stay in cache; the result equals
    /// [`Model::forward_eval_traced`].
    pub fn forward_eval(&self, x: &Tensor<S>) -> Result<Vec<S>> {
        let batch = self.check_input(x)?;
        let split = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Flatten))
            .unwrap_or(self.layers.len());
        let in_shape = &x.shape()[1..];
        let per: usize = in_shape.iter().product();
        let flat = self.arch.flat_features();
        let mut features = Vec::with_capacity(batch * flat);
        let mut one_shape = vec![1];
        one_shape.extend_from_slice(in_shape);
        for sample in x.data().chunks_exact(per) {
            let mut h = Tensor::from_vec(&one_shape, sample.to_vec())?;
            for layer in &self.layers[..split] {
                h = eval_layer(layer, h)?;
            }
            features.extend_from_slice(h.data());
        }
        let mut h = Tensor::from_vec(&[batch, flat], features)?;
        for layer in self.layers[split..].iter().skip(1) {
            h = eval_layer(layer, h)?;
        }
        Ok(h.into_data())
    }

    /// Eval-mode forward that also reports the output shape of every layer.
    pub fn forward_eval_traced(
        &self,
        x: &Tensor<S>,
        trace: bool,
    ) -> Result<(Vec<S>, Vec<(&'static str, Vec<usize>)>)> {
        self.check_input(x)?;
        let mut shapes = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            h = eval_layer(layer, h)?;
            if trace {
                shapes.push((layer.kind(), h.shape().to_vec()));
            }
        }
        Ok((h.into_data(), shapes))
    }

    /// Gradients of a scalar loss given its gradient with respect to the
    /// output probabilities.
    pub fn backward(&self, cache: &ForwardCache<S>, grad_probs: &[S]) -> Result<Gradients<S>> {
        if cache.generation != self.generation || cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if grad_probs.len() != cache.batch {
            return Err(Error::ShapeMismatch {
                expected: vec![cache.batch],
                found: vec![grad_probs.len()],
            });
        }
        let mut g = Tensor::from_vec(&[cache.batch, 1], grad_probs.to_vec())?;
        let mut rev_grads: Vec<Tensor<S>> = Vec::new();
        for (idx, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            g = match (layer, lc) {
                (Layer::Conv(conv), LayerCache::Conv(c)) => {
                    let (gi, gw, gb) = conv.backward(&g, c, idx > 0)?;
                    rev_grads.extend([gb, gw]);
                    match gi {
                        Some(gi) => gi,
                        None => break,
                    }
                }
                (Layer::Relu, LayerCache::Relu(input)) => relu_backward(&g, input),
                (Layer::BatchNorm(bn), LayerCache::BatchNorm(c)) => {
                    let (gi, gg, gb) = bn.backward(&g, c)?;
                    rev_grads.extend([gb, gg]);
                    gi
                }
                (Layer::MaxPool, LayerCache::MaxPool { argmax, input_shape }) => {
                    maxpool2_backward(&g, argmax, input_shape)?
                }
                (Layer::Flatten, LayerCache::Flatten(shape)) => g.reshape(shape)?,
                (Layer::Dense(d), LayerCache::Dense(input)) => {
                    let (gi, gw, gb) = d.backward(&g, input)?;
                    rev_grads.extend([gb, gw]);
                    gi
                }
                (Layer::Sigmoid, LayerCache::Sigmoid(out)) => sigmoid_backward(&g, out),
                _ => return Err(Error::StaleCache),
            };
        }
        rev_grads.reverse();
        Ok(Gradients { tensors: rev_grads })
    }

    /// Converts every tensor to another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2d {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                }),
                Layer::Dense(d) => Layer::Dense(Dense {
                    weight: d.weight.cast(),
                    bias: d.bias.cast(),
                }),
                Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                    gamma: b.gamma.cast(),
                    beta: b.beta.cast(),
                    running_mean: b.running_mean.cast(),
                    running_var: b.running_var.cast(),
                    config: b.config,
                }),
                Layer::Relu => Layer::Relu,
                Layer::MaxPool => Layer::MaxPool,
                Layer::Flatten => Layer::Flatten,
                Layer::Sigmoid => Layer::Sigmoid,
            })
            .collect();
        Model {
            arch: self.arch.clone(),
            layers,
            seed: self.seed,
            generation: 0,
        }
    }
}

fn eval_layer<S: Scalar>(layer: &Layer<S>, h: Tensor<S>) -> Result<Tensor<S>> {
    Ok(match layer {
        Layer::Conv(conv) => conv.forward_eval(&h)?,
        Layer::Relu => relu_forward(&h),
        Layer::BatchNorm(bn) => bn.forward_eval(&h)?,
        Layer::MaxPool => maxpool2_forward(&h)?.0,
        Layer::Flatten => {
            let batch = h.shape()[0];
            let flat: usize = h.shape()[1..].iter().product();
            h.reshape(&[batch, flat])?
        }
        Layer::Dense(d) => d.forward(&h)?,
        Layer::Sigmoid => sigmoid_forward(&h),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(shape: [usize; 4], phase: f64) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(&shape, (0..len).map(|v| ((v as f64 + phase) * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn full_size_shape_chain() {
        let model = Model::<f32>::init(&Architecture::full_size(), 1).unwrap();
        let x = Tensor::zeros(&model.input_shape(1));
        let (_, trace) = model.forward_eval_traced(&x, true).unwrap();
        let pooled: Vec<_> = trace.iter().filter(|(k, _)| *k == "maxpool").map(|(_, s)| s.clone()).collect();
        assert_eq!(pooled, vec![vec![1, 24, 20, 20], vec![1, 48, 10, 10], vec![1, 96, 5, 5]]);
        let dense: Vec<_> = trace.iter().filter(|(k, _)| *k == "dense").map(|(_, s)| s[1]).collect();
        assert_eq!(dense, vec![1200, 600, 1]);
        assert_eq!(model.architecture().flat_features(), 2400);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Model::<f64>::init(&Architecture::thumbnail(), 7).unwrap();
        let b = Model::<f64>::init(&Architecture::thumbnail(), 7).unwrap();
        let c = Model::<f64>::init(&Architecture::thumbnail(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for layer in a.layers() {
            match layer {
                Layer::Conv(cv) => assert!(cv.bias.data().iter().all(|&v| v == 0.0)),
                Layer::Dense(d) => assert!(d.bias.data().iter().all(|&v| v == 0.0)),
                Layer::BatchNorm(bn) => {
                    assert!(bn.gamma.data().iter().all(|&v| v == 1.0));
                    assert!(bn.beta.data().iter().all(|&v| v == 0.0));
                    assert!(bn.running_mean.data().iter().all(|&v| v == 0.0));
                    assert!(bn.running_var.data().iter().all(|&v| v == 1.0));
                }
                _ => {}
            }
        }
    }

    #[test]
    fn he_init_std() {
        // conv2 of table 1: 48 x 24 x 3 x 3 = 10368 draws, fan_in 216
        let model = Model::<f64>::init(&Architecture::full_size(), 3).unwrap();
        let Layer::Conv(conv) = &model.layers()[4] else { panic!("layer 4 is conv") };
        let w = conv.weight.data();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let expect = (2.0 / 216.0f64).sqrt();
        assert!((std / expect - 1.0).abs() < 0.1, "std {std} vs {expect}");
    }

    #[test]
    fn outputs_are_probabilities_and_eval_is_repeatable() {
        let model = Model::<f64>::init(&Architecture::thumbnail(), 2).unwrap();
        let x = input(model.input_shape(5), 0.0);
        let a = model.forward_eval(&x).unwrap();
        let b = model.forward_eval(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(a, model.forward_eval_traced(&x, false).unwrap().0);
    }

    #[test]
    fn input_shape_is_checked() {
        let model = Model::<f64>::init(&Architecture::thumbnail(), 2).unwrap();
        assert!(matches!(
            model.forward_eval(&Tensor::zeros(&[1, 2, 6, 6])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut model = Model::<f64>::init(&Architecture::thumbnail(), 2).unwrap();
        let x = input(model.input_shape(3), 1.0);
        let (_, cache) = model.forward_train(&x).unwrap();
        model.params_mut();
        assert!(matches!(model.backward(&cache, &[0.0; 3]), Err(Error::StaleCache)));
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut model = Model::<f64>::init(&Architecture::thumbnail(), 2).unwrap();
        let x = input(model.input_shape(4), 1.0);
        let (_, cache) = model.forward_train(&x).unwrap();
        let grads = model.backward(&cache, &[0.0; 4]).unwrap();
        assert_eq!(grads.tensors.len(), model.params().len());
        for (g, p) in grads.tensors.iter().zip(model.params()) {
            assert_eq!(g.shape(), p.shape());
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }
}
