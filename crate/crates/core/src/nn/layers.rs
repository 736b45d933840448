//! Stateful layers: parameters plus whatever the backward pass needs from
//! the most recent forward pass.

use rand::Rng as _;

use super::ops::{self, BatchNormCache, Mode};
use super::tensor::{Float, Param, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// A differentiable component with named parameters.
///
/// `backward` consumes the cache of the latest `forward`, accumulates parameter
/// gradients and returns the gradient with respect to the input.
pub trait Module<T: Float> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>>;

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn missing_cache(layer: &str) -> Error {
    Error::InvalidArgument(format!("{layer}: backward called before forward"))
}

pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
    /// When false the input gradient is not computed (first layer of a network).
    pub need_input_grad: bool,
    input: Option<Tensor<T>>,
}

impl<T: Float> Conv2d<T> {
    /// Kernel and bias drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect()
        };
        let w = draw(out_channels * in_channels * kernel * kernel);
        let b = draw(out_channels);
        Self {
            weight: Param::trainable(
                Tensor::new(vec![out_channels, in_channels, kernel, kernel], w).expect("sized"),
            ),
            bias: Param::trainable(Tensor::new(vec![out_channels], b).expect("sized")),
            stride,
            pad,
            need_input_grad: true,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl<T: Float> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        let y = ops::conv2d_forward(
            x,
            &self.weight.value,
            Some(&self.bias.value),
            self.stride,
            self.pad,
        )?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache("conv2d"))?;
        let grads = ops::conv2d_backward(
            &x,
            &self.weight.value,
            dy,
            self.stride,
            self.pad,
            self.need_input_grad,
        )?;
        self.weight.grad.add_assign(&grads.dweight);
        self.bias.grad.add_assign(&grads.dbias);
        Ok(grads.dx.unwrap_or_else(|| Tensor::zeros(x.shape())))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum BnCache<T> {
    Train(BatchNormCache<T>),
    Eval(BatchNormCache<T>),
}

/// Batch normalisation over `(batch, height, width)` per channel.
///
/// Running statistics start at mean 0 / variance 1 and follow
/// `r <- (1 - momentum) r + momentum * batch_stat`, with the unbiased batch
/// variance feeding the running variance.
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::trainable(Tensor::full(&[channels], T::one())),
            beta: Param::trainable(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::full(&[channels], T::one())),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }
}

impl<T: Float> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => {
                let (y, cache, stats) =
                    ops::batchnorm_train_forward(x, &self.gamma.value, &self.beta.value, self.eps)?;
                let m = self.momentum;
                let bessel = if stats.count > 1 {
                    stats.count as f64 / (stats.count - 1) as f64
                } else {
                    1.0
                };
                for (c, (rm, rv)) in self
                    .running_mean
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(self.running_var.value.data_mut().iter_mut())
                    .enumerate()
                {
                    *rm = T::of((1.0 - m) * rm.as_f64() + m * stats.mean[c]);
                    *rv = T::of((1.0 - m) * rv.as_f64() + m * stats.var[c] * bessel);
                }
                self.cache = Some(BnCache::Train(cache));
                Ok(y)
            }
            Mode::Eval => {
                let (y, cache) = ops::batchnorm_eval_forward(
                    x,
                    &self.gamma.value,
                    &self.beta.value,
                    &self.running_mean.value,
                    &self.running_var.value,
                    self.eps,
                )?;
                self.cache = Some(BnCache::Eval(cache));
                Ok(y)
            }
        }
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (dx, dgamma, dbeta) = match self
            .cache
            .take()
            .ok_or_else(|| missing_cache("batchnorm"))?
        {
            BnCache::Train(c) => ops::batchnorm_train_backward(dy, &self.gamma.value, &c)?,
            BnCache::Eval(c) => ops::batchnorm_eval_backward(dy, &self.gamma.value, &c)?,
        };
        self.gamma.grad.add_assign(&dgamma);
        self.beta.grad.add_assign(&dbeta);
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[derive(Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T: Float> Module<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        let y = ops::relu_forward(x);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.output.take().ok_or_else(|| missing_cache("relu"))?;
        Ok(ops::relu_backward(dy, &y))
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

#[derive(Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl<T: Float> Module<T> for MaxPool2 {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        let (y, idx) = ops::maxpool2_forward(x)?;
        self.cache = Some((idx, x.shape().to_vec()));
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (idx, shape) = self.cache.take().ok_or_else(|| missing_cache("maxpool"))?;
        Ok(ops::maxpool2_backward(dy, &idx, &shape))
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

#[derive(Default)]
pub struct Upsample2;

impl<T: Float> Module<T> for Upsample2 {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode, _rng: &mut Rng) -> Result<Tensor<T>> {
        ops::upsample2_forward(x)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        ops::upsample2_backward(dy)
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}

pub struct Dropout<T> {
    pub p: f64,
    mask: Option<Vec<T>>,
}

impl<T: Float> Dropout<T> {
    pub fn new(p: f64) -> Self {
        Self { p, mask: None }
    }
}

impl<T: Float> Module<T> for Dropout<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let (y, mask) = ops::dropout_forward(x, self.p, mode, rng);
        self.mask = mask;
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::dropout_backward(dy, self.mask.take().as_deref()))
    }

    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<T>)) {}

    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<T>)) {}
}
