use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// Negative slope of every leaky ReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Kaiming-normal weights for a leaky-ReLU network: `std = sqrt(2 / ((1 + a^2) fan_in))`.
pub(crate) fn kaiming<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let gain = 2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
    let std = (gain / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: kaiming(rng, vec![cout, cin, kernel, kernel], cin * kernel * kernel),
            bias: Tensor::zeros(vec![cout]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub(crate) fn apply(&self, tape: &mut Tape<T>, w: Var, b: Var, x: Var) -> Result<Var> {
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(rng: &mut R, din: usize, dout: usize) -> Self {
        Linear { weight: kaiming(rng, vec![dout, din], din), bias: Tensor::zeros(vec![dout]) }
    }
}

/// Named access to the trainable tensors of a network.
pub trait Parameterized<T: Real> {
    /// Parameters in a fixed order, with stable names.
    fn params(&self) -> Vec<(String, &Tensor<T>)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// A network whose parameters were registered as leaves of a tape.
///
/// `vars[i]` is the leaf of `module.params()[i]`. A binding made with
/// `trainable = false` freezes the module: gradients stop at its weights.
pub struct Bound<'m, M> {
    pub module: &'m M,
    vars: Vec<Var>,
    trainable: bool,
}

impl<'m, M> Bound<'m, M> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub(crate) fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

pub fn bind<'m, T: Real, M: Parameterized<T>>(module: &'m M, tape: &mut Tape<T>, trainable: bool) -> Bound<'m, M> {
    let vars = module.params().into_iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect();
    Bound { module, vars, trainable }
}

/// Gradients accumulated on a binding's leaves; zeros where none arrived.
pub fn collect_grads<T: Real, M: Parameterized<T>>(tape: &Tape<T>, bound: &Bound<'_, M>) -> Vec<Tensor<T>> {
    bound
        .module
        .params()
        .iter()
        .zip(bound.vars())
        .map(|((_, p), &v)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect()
}
