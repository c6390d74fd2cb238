//! Parameterized layers: named parameters, seeded initialization, and the
//! conv/BN/linear building blocks the network is assembled from.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::conv::conv2d;
use crate::tensor::elementwise::relu;
use crate::tensor::matmul::matmul;
use crate::tensor::norm::batch_norm;
use crate::tensor::shape_ops::add_bias;
use crate::tensor::Tensor;

/// Forward-pass mode. Train mode uses batch statistics in normalization
/// layers and updates their running buffers; eval mode is a pure function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// A named trainable tensor. Names are dotted paths unique within a model;
/// gradient buffers are cleared only by an explicit `zero_grad`.
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        Parameter {
            name: name.into(),
            value: value.requires_grad(),
        }
    }
}

/// Receiver for a module's state: trainable parameters and non-trainable
/// buffers (running statistics).
pub trait StateSink<S: Scalar> {
    fn param(&mut self, param: &Parameter<S>);
    fn buffer(&mut self, _name: &str, _shape: &[usize], _data: &RefCell<Vec<S>>) {}
}

/// Collects parameter handles in visit order.
pub struct ParamList<S: Scalar> {
    pub entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamList<S> {
    pub fn new() -> Self {
        ParamList { entries: vec![] }
    }

    pub fn tensors(&self) -> Vec<Tensor<S>> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }
}

impl<S: Scalar> Default for ParamList<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> StateSink<S> for ParamList<S> {
    fn param(&mut self, param: &Parameter<S>) {
        self.entries.push((param.name.clone(), param.value.clone()));
    }
}

/// Fan-in-scaled uniform init: `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
pub fn init_uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha20Rng) -> Tensor<S> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel)
        .map(|_| S::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("init shape")
}

pub struct Conv2d<S: Scalar> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = cin * ksize * ksize;
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                init_uniform(&[cout, cin, ksize, ksize], fan_in, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv2d(x, &self.weight.value, &self.bias.value, self.stride, self.padding)
    }

    pub fn visit_state(&self, sink: &mut dyn StateSink<S>) {
        sink.param(&self.weight);
        sink.param(&self.bias);
    }
}

pub struct BatchNorm2d<S: Scalar> {
    pub gamma: Parameter<S>,
    pub beta: Parameter<S>,
    name: String,
    running_mean: RefCell<Vec<S>>,
    running_var: RefCell<Vec<S>>,
    pub eps: f64,
    pub momentum: f64,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], S::one())),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            name: name.to_string(),
            running_mean: RefCell::new(vec![S::zero(); channels]),
            running_var: RefCell::new(vec![S::one(); channels]),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
        }
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let mut rm = self.running_mean.borrow_mut();
        let mut rv = self.running_var.borrow_mut();
        batch_norm(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut rm,
            &mut rv,
            self.eps,
            self.momentum,
            mode.is_train(),
        )
    }

    pub fn visit_state(&self, sink: &mut dyn StateSink<S>) {
        sink.param(&self.gamma);
        sink.param(&self.beta);
        let c = self.running_mean.borrow().len();
        sink.buffer(
            &format!("{}.running_mean", self.name),
            &[c],
            &self.running_mean,
        );
        sink.buffer(
            &format!("{}.running_var", self.name),
            &[c],
            &self.running_var,
        );
    }
}

/// conv -> BN -> ReLU.
pub struct ConvBlock<S: Scalar> {
    pub conv: Conv2d<S>,
    pub bn: BatchNorm2d<S>,
}

impl<S: Scalar> ConvBlock<S> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        ksize: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, ksize, 1, ksize / 2, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
        }
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        Ok(relu(&self.bn.forward(&self.conv.forward(x)?, mode)?))
    }

    pub fn visit_state(&self, sink: &mut dyn StateSink<S>) {
        self.conv.visit_state(sink);
        self.bn.visit_state(sink);
    }
}

/// Per-token affine map on the last dimension: `x [.., in] -> [.., out]`.
pub struct Linear<S: Scalar> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha20Rng) -> Self {
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                init_uniform(&[fan_in, fan_out], fan_in, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        add_bias(&matmul(x, &self.weight.value)?, &self.bias.value)
    }

    pub fn visit_state(&self, sink: &mut dyn StateSink<S>) {
        sink.param(&self.weight);
        sink.param(&self.bias);
    }
}
