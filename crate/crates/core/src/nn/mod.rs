//! A small reverse-mode layer engine: every forward pass returns a [`Tape`] holding the
//! activations its backward pass needs, so one network can be run several times within a
//! training step and differentiated along each run independently.

mod layers;
mod optim;

pub use layers::{Conv2d, ConvTranspose2d, Linear};
pub use optim::{Adam, AdamConfig, AdamState};

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Param { shape, value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything that owns trainable parameters in a fixed, named order.
pub trait Module {
    fn params(&self) -> Vec<(String, &Param)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Param)>;

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// SHA-256 over every parameter value, in declaration order.
    fn param_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, p) in self.params() {
            h.update(name.as_bytes());
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    LeakyRelu(f32),
    Relu,
    Tanh,
    Flatten,
    /// Reshapes `[B, n]` into `[B, c, h, w]`.
    Unflatten([usize; 3]),
}

impl Layer {
    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Linear(l) => l.params().to_vec(),
            Layer::Conv(l) => l.params().to_vec(),
            Layer::ConvT(l) => l.params().to_vec(),
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear(l) => l.params_mut().into_iter().collect(),
            Layer::Conv(l) => l.params_mut().into_iter().collect(),
            Layer::ConvT(l) => l.params_mut().into_iter().collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug)]
enum Cache {
    Linear(Tensor),
    Conv { in_shape: Vec<usize>, cols: Vec<f32> },
    ConvT { in_shape: Vec<usize>, x_r: Vec<f32> },
    Activation(Tensor),
    Shape(Vec<usize>),
}

/// Activations recorded by one forward pass of a [`Sequential`].
#[derive(Debug, Default)]
pub struct Tape {
    caches: Vec<Cache>,
}

#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    /// Forward pass that records a tape for [`Sequential::backward`].
    pub fn forward(&self, x: &Tensor) -> (Tensor, Tape) {
        let mut tape = Tape { caches: Vec::with_capacity(self.layers.len()) };
        let mut h = x.clone();
        for layer in &self.layers {
            let (out, cache) = Self::step(layer, h);
            tape.caches.push(cache);
            h = out;
        }
        (h, tape)
    }

    /// Forward pass without recording.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for layer in &self.layers {
            h = Self::step(layer, h).0;
        }
        h
    }

    fn step(layer: &Layer, h: Tensor) -> (Tensor, Cache) {
        match layer {
            Layer::Linear(l) => {
                let y = l.forward(&h);
                (y, Cache::Linear(h))
            }
            Layer::Conv(c) => {
                let in_shape = h.shape().to_vec();
                let (y, cols) = c.forward(&h);
                (y, Cache::Conv { in_shape, cols })
            }
            Layer::ConvT(c) => {
                let in_shape = h.shape().to_vec();
                let (y, x_r) = c.forward(&h);
                (y, Cache::ConvT { in_shape, x_r })
            }
            Layer::LeakyRelu(slope) => {
                let s = *slope;
                let y = h.map(|v| if v > 0.0 { v } else { s * v });
                (y.clone(), Cache::Activation(y))
            }
            Layer::Relu => {
                let y = h.map(|v| v.max(0.0));
                (y.clone(), Cache::Activation(y))
            }
            Layer::Tanh => {
                let y = h.map(f32::tanh);
                (y.clone(), Cache::Activation(y))
            }
            Layer::Flatten => {
                let shape = h.shape().to_vec();
                let b = h.batch();
                let n = h.row_len();
                (h.reshape(&[b, n]).expect("flatten"), Cache::Shape(shape))
            }
            Layer::Unflatten([c, hh, ww]) => {
                let shape = h.shape().to_vec();
                let b = h.batch();
                (h.reshape(&[b, *c, *hh, *ww]).expect("unflatten"), Cache::Shape(shape))
            }
        }
    }

    /// Backpropagates `grad` through the recorded pass, accumulating parameter gradients.
    pub fn backward(&mut self, tape: Tape, grad: Tensor) -> Tensor {
        self.backward_impl(tape, grad, true)
    }

    /// Backpropagates to the input only; parameter gradients are left untouched.
    pub fn backward_input(&self, tape: Tape, grad: Tensor) -> Tensor {
        let mut g = grad;
        for (layer, cache) in self.layers.iter().zip(tape.caches).rev() {
            g = match (layer, cache) {
                (Layer::Linear(l), Cache::Linear(x)) => l.input_grad(x.shape(), &g),
                (Layer::Conv(c), Cache::Conv { in_shape, .. }) => c.input_grad(&in_shape, &g),
                (Layer::ConvT(c), Cache::ConvT { in_shape, .. }) => c.input_grad(&in_shape, &g),
                (layer, cache) => activation_backward(layer, cache, g),
            };
        }
        g
    }

    fn backward_impl(&mut self, tape: Tape, grad: Tensor, accumulate: bool) -> Tensor {
        let mut g = grad;
        for (layer, cache) in self.layers.iter_mut().zip(tape.caches).rev() {
            g = match (layer, cache) {
                (Layer::Linear(l), Cache::Linear(x)) => l.backward(&x, &g, accumulate),
                (Layer::Conv(c), Cache::Conv { in_shape, cols }) => {
                    c.backward(&in_shape, &cols, &g, accumulate)
                }
                (Layer::ConvT(c), Cache::ConvT { in_shape, x_r }) => {
                    c.backward(&in_shape, &x_r, &g, accumulate)
                }
                (layer, cache) => activation_backward(layer, cache, g),
            };
        }
        g
    }
}

fn activation_backward(layer: &Layer, cache: Cache, g: Tensor) -> Tensor {
    match (layer, cache) {
        (Layer::LeakyRelu(s), Cache::Activation(y)) => {
            let mut g = g;
            for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                if *yv <= 0.0 {
                    *gv *= s;
                }
            }
            g
        }
        (Layer::Relu, Cache::Activation(y)) => {
            let mut g = g;
            for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                if *yv <= 0.0 {
                    *gv = 0.0;
                }
            }
            g
        }
        (Layer::Tanh, Cache::Activation(y)) => {
            let mut g = g;
            for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                *gv *= 1.0 - yv * yv;
            }
            g
        }
        (Layer::Flatten | Layer::Unflatten(_), Cache::Shape(shape)) => {
            g.reshape(&shape).expect("shape restore")
        }
        _ => unreachable!("tape does not match layer stack"),
    }
}

impl Module for Sequential {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (p, suffix) in layer.params().into_iter().zip(["weight", "bias"]) {
                out.push((format!("{i}.{suffix}"), p));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (p, suffix) in layer.params_mut().into_iter().zip(["weight", "bias"]) {
                out.push((format!("{i}.{suffix}"), p));
            }
        }
        out
    }
}

/// Prefixes every parameter name of `m` with `prefix.`.
pub fn prefixed<'a>(prefix: &str, params: Vec<(String, &'a Param)>) -> Vec<(String, &'a Param)> {
    params.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

pub fn prefixed_mut<'a>(prefix: &str, params: Vec<(String, &'a mut Param)>) -> Vec<(String, &'a mut Param)> {
    params.into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}
