use std::cell::RefCell;

use rand::Rng;

use crate::tensor::{self, BatchNormMode, Element, Parameter, Result, Tensor};

/// Forward-pass behaviour of layers with batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// Non-trainable named state (batch-norm running statistics).
#[derive(Debug)]
pub struct Buffer<E: Element> {
    pub name: String,
    pub data: RefCell<Vec<E>>,
}

impl<E: Element> Buffer<E> {
    pub fn new(name: impl Into<String>, data: Vec<E>) -> Self {
        Self {
            name: name.into(),
            data: RefCell::new(data),
        }
    }
}

/// Anything owning parameters and buffers in a fixed, name-addressable order.
pub trait Module<E: Element> {
    fn parameters(&self) -> Vec<&Parameter<E>>;

    fn buffers(&self) -> Vec<&Buffer<E>> {
        Vec::new()
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }

    fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.value.zero_grad());
    }
}

/// Kaiming-uniform fan-in initialization with ReLU gain: `U(-b, b)`,
/// `b = sqrt(6 / fan_in)`.
pub(crate) fn kaiming_uniform<E: Element, R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    fan_in: usize,
) -> Vec<E> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| E::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect()
}

fn leaf<E: Element>(data: Vec<E>, shape: &[usize], trainable: bool) -> Tensor<E> {
    if trainable {
        Tensor::parameter(data, shape).expect("layer shapes are positive")
    } else {
        Tensor::from_vec(data, shape).expect("layer shapes are positive")
    }
}

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Debug)]
pub struct Linear<E: Element> {
    pub weight: Parameter<E>,
    pub bias: Parameter<E>,
}

impl<E: Element> Linear<E> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w = kaiming_uniform(rng, input * output, input);
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                leaf(w, &[input, output], trainable),
                true,
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                leaf(vec![E::zero(); output], &[output], trainable),
                false,
            ),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        tensor::add(&tensor::matmul(x, &self.weight.value)?, &self.bias.value)
    }
}

impl<E: Element> Module<E> for Linear<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        vec![&self.weight, &self.bias]
    }
}

/// Square-kernel convolution without bias (always followed by batch norm).
#[derive(Debug)]
pub struct Conv2d<E: Element> {
    pub weight: Parameter<E>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Element> Conv2d<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = input * kernel * kernel;
        let w = kaiming_uniform(rng, output * fan_in, fan_in);
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                leaf(w, &[output, input, kernel, kernel], trainable),
                true,
            ),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        tensor::conv2d(x, &self.weight.value, self.stride, self.padding)
    }
}

impl<E: Element> Module<E> for Conv2d<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        vec![&self.weight]
    }
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Batch normalization over channels of `[B,C]` or `[B,C,H,W]` inputs.
///
/// Running statistics follow `r <- 0.9 r + 0.1 batch` and only move in train mode.
#[derive(Debug)]
pub struct BatchNorm<E: Element> {
    pub gamma: Parameter<E>,
    pub beta: Parameter<E>,
    pub running_mean: Buffer<E>,
    pub running_var: Buffer<E>,
}

impl<E: Element> BatchNorm<E> {
    pub fn new(name: &str, channels: usize, trainable: bool) -> Self {
        Self {
            gamma: Parameter::new(
                format!("{name}.gamma"),
                leaf(vec![E::one(); channels], &[channels], trainable),
                false,
            ),
            beta: Parameter::new(
                format!("{name}.beta"),
                leaf(vec![E::zero(); channels], &[channels], trainable),
                false,
            ),
            running_mean: Buffer::new(format!("{name}.running_mean"), vec![E::zero(); channels]),
            running_var: Buffer::new(format!("{name}.running_var"), vec![E::one(); channels]),
        }
    }

    pub fn forward(&self, x: &Tensor<E>, mode: Mode) -> Result<Tensor<E>> {
        let eps = E::from_f64_lossy(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, stats) = tensor::batch_norm(
                    x,
                    &self.gamma.value,
                    &self.beta.value,
                    BatchNormMode::Train { eps },
                )?;
                let stats = stats.expect("train mode returns statistics");
                let m = E::from_f64_lossy(BN_MOMENTUM);
                let k = E::one() - m;
                let mut rm = self.running_mean.data.borrow_mut();
                let mut rv = self.running_var.data.borrow_mut();
                for (r, &s) in rm.iter_mut().zip(&stats.mean) {
                    *r = m * *r + k * s;
                }
                for (r, &s) in rv.iter_mut().zip(&stats.var_unbiased) {
                    *r = m * *r + k * s;
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.running_mean.data.borrow();
                let rv = self.running_var.data.borrow();
                let mode = BatchNormMode::Eval {
                    mean: &rm,
                    var: &rv,
                    eps,
                };
                tensor::batch_norm(x, &self.gamma.value, &self.beta.value, mode).map(|(y, _)| y)
            }
        }
    }
}

impl<E: Element> Module<E> for BatchNorm<E> {
    fn parameters(&self) -> Vec<&Parameter<E>> {
        vec![&self.gamma, &self.beta]
    }

    fn buffers(&self) -> Vec<&Buffer<E>> {
        vec![&self.running_mean, &self.running_var]
    }
}

/// Copies values from `src` into `dst`, matching by position.
pub fn copy_state<E: Element>(dst: &dyn Module<E>, src: &dyn Module<E>) {
    for (d, s) in dst.parameters().iter().zip(src.parameters()) {
        d.value.data_mut().copy_from_slice(&s.value.data());
    }
    for (d, s) in dst.buffers().iter().zip(src.buffers()) {
        d.data.borrow_mut().copy_from_slice(&s.data.borrow());
    }
}
