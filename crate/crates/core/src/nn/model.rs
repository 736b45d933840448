//! The hourglass landmark model.
//!
//! ```text
//! entry:     7x7/2 conv (N) -> res N->2N -> maxpool -> res 2N->2N, 2N->2N, 2N->4N
//! hourglass: level k: x + up(next(3 x res(pool(x))))   for k = 1..d
//!            the deepest level runs 3 more residual blocks in place of `next`
//! output:    [dropout -> 1x1 conv -> BN -> ReLU] x 2 -> 1x1 conv (M) -> soft-argmax
//! ```
//!
//! The heatmap resolution is `S / 4` for an input of side `S`.

use serde::{Deserialize, Serialize};

use super::blocks::{BlockKind, ResidualBlock};
use super::layers::{join, BatchNorm2d, Conv2d, Dropout, MaxPool2, Module, Relu, Upsample2};
use super::ops::{self, Mode};
use super::tensor::{Float, Param, Tensor};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Name prefix of the final 1x1 convolution producing one heatmap per landmark.
pub const HEAD_PREFIX: &str = "out.head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Network width `N`.
    pub width: usize,
    /// Hourglass depth `d` (number of max-pooling levels).
    pub depth: usize,
    /// Number of output landmarks `M`.
    pub landmarks: usize,
    /// Input side `S` in pixels.
    pub input_size: usize,
    /// Soft-argmax temperature.
    pub beta: f64,
    pub dropout: f64,
    pub block: BlockKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 24,
            depth: 6,
            landmarks: 16,
            input_size: 256,
            beta: 1.0,
            dropout: 0.25,
            block: BlockKind::Hmp,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.width == 0 {
            return err("width N must be >= 1".into());
        }
        if self.depth == 0 {
            return err("depth d must be >= 1".into());
        }
        if self.landmarks == 0 {
            return err("landmark count M must be >= 1".into());
        }
        let Some(unit) = 1usize.checked_shl(self.depth as u32 + 2) else {
            return err(format!("depth {} is too large", self.depth));
        };
        if self.input_size == 0 || !self.input_size.is_multiple_of(unit) {
            return err(format!(
                "input size {} must be a positive multiple of 2^(d+2) = {unit}",
                self.input_size
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return err(format!("soft-argmax beta must be > 0, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn heatmap_size(&self) -> usize {
        self.input_size / 4
    }

    /// Channel width inside the hourglass and output blocks.
    pub fn hourglass_width(&self) -> usize {
        4 * self.width
    }
}

/// Conv 1x1 -> batch-norm -> ReLU.
struct ConvBnRelu<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
    relu: Relu<T>,
}

impl<T: Float> ConvBnRelu<T> {
    fn new(n: usize, m: usize, rng: &mut Rng) -> Self {
        Self {
            conv: Conv2d::new(n, m, 1, 1, 0, rng),
            bn: BatchNorm2d::new(m),
            relu: Relu::default(),
        }
    }
}

impl<T: Float> Module<T> for ConvBnRelu<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, mode, rng)?;
        let y = self.bn.forward(&y, mode, rng)?;
        self.relu.forward(&y, mode, rng)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.relu.backward(dy)?;
        let d = self.bn.backward(&d)?;
        self.conv.backward(&d)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

fn run_blocks<T: Float>(
    blocks: &mut [ResidualBlock<T>],
    x: Tensor<T>,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    blocks
        .iter_mut()
        .try_fold(x, |y, b| b.forward(&y, mode, rng))
}

fn back_blocks<T: Float>(blocks: &mut [ResidualBlock<T>], dy: Tensor<T>) -> Result<Tensor<T>> {
    blocks.iter_mut().rev().try_fold(dy, |d, b| b.backward(&d))
}

enum Inner<T> {
    Next(Box<HourglassLevel<T>>),
    Bottom(Vec<ResidualBlock<T>>),
}

struct HourglassLevel<T> {
    level: usize,
    pool: MaxPool2,
    blocks: Vec<ResidualBlock<T>>,
    inner: Inner<T>,
    up: Upsample2,
}

impl<T: Float> HourglassLevel<T> {
    fn new(level: usize, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c = cfg.hourglass_width();
        let triple = |rng: &mut Rng| -> Result<Vec<ResidualBlock<T>>> {
            (0..3)
                .map(|_| ResidualBlock::new(cfg.block, c, c, rng))
                .collect()
        };
        let blocks = triple(rng)?;
        let inner = if level < cfg.depth {
            Inner::Next(Box::new(HourglassLevel::new(level + 1, cfg, rng)?))
        } else {
            Inner::Bottom(triple(rng)?)
        };
        Ok(Self {
            level,
            pool: MaxPool2::default(),
            blocks,
            inner,
            up: Upsample2,
        })
    }

    fn prefix(&self) -> String {
        format!("hg.{}", self.level)
    }
}

impl<T: Float> Module<T> for HourglassLevel<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let y = self.pool.forward(x, mode, rng)?;
        let y = run_blocks(&mut self.blocks, y, mode, rng)?;
        let y = match &mut self.inner {
            Inner::Next(next) => next.forward(&y, mode, rng)?,
            Inner::Bottom(blocks) => run_blocks(blocks, y, mode, rng)?,
        };
        let y = self.up.forward(&y, mode, rng)?;
        ops::add(x, &y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d = Module::<T>::backward(&mut self.up, dy)?;
        let d = match &mut self.inner {
            Inner::Next(next) => next.backward(&d)?,
            Inner::Bottom(blocks) => back_blocks(blocks, d)?,
        };
        let d = back_blocks(&mut self.blocks, d)?;
        let mut dx = Module::<T>::backward(&mut self.pool, &d)?;
        dx.add_assign(dy);
        Ok(dx)
    }

    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        let p = self.prefix();
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{p}.res.{i}"), f);
        }
        match &self.inner {
            Inner::Next(next) => next.visit("", f),
            Inner::Bottom(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.visit(&format!("{p}.bottom.{i}"), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        let p = self.prefix();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{p}.res.{i}"), f);
        }
        match &mut self.inner {
            Inner::Next(next) => next.visit_mut("", f),
            Inner::Bottom(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.visit_mut(&format!("{p}.bottom.{i}"), f);
                }
            }
        }
    }
}

/// Hourglass network with a soft-argmax head. Output coordinates are
/// normalised: `x / W`, `y / H` of the heatmap grid.
pub struct HourglassModel<T> {
    config: ModelConfig,
    entry_conv: Conv2d<T>,
    entry_res: ResidualBlock<T>,
    entry_pool: MaxPool2,
    entry_blocks: Vec<ResidualBlock<T>>,
    hourglass: HourglassLevel<T>,
    drop1: Dropout<T>,
    mix1: ConvBnRelu<T>,
    drop2: Dropout<T>,
    mix2: ConvBnRelu<T>,
    head: Conv2d<T>,
    soft_argmax: Option<(Tensor<T>, Tensor<T>)>,
    last_heatmap: Option<Tensor<T>>,
}

impl<T: Float> HourglassModel<T> {
    /// Builds a freshly initialised model. Initial weights depend only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[rng::tag::INIT]);
        let n = config.width;
        let c = config.hourglass_width();
        let kind = config.block;
        let mut entry_conv = Conv2d::new(1, n, 7, 2, 3, &mut rng);
        entry_conv.need_input_grad = false;
        let entry_res = ResidualBlock::new(kind, n, 2 * n, &mut rng)?;
        let entry_blocks = vec![
            ResidualBlock::new(kind, 2 * n, 2 * n, &mut rng)?,
            ResidualBlock::new(kind, 2 * n, 2 * n, &mut rng)?,
            ResidualBlock::new(kind, 2 * n, c, &mut rng)?,
        ];
        let hourglass = HourglassLevel::new(1, &config, &mut rng)?;
        let mix1 = ConvBnRelu::new(c, c, &mut rng);
        let mix2 = ConvBnRelu::new(c, c, &mut rng);
        // The head draws from its own stream so that its initialisation does
        // not depend on the body and vice versa.
        let mut head_rng = rng::stream(seed, &[rng::tag::HEAD]);
        let head = Conv2d::new(c, config.landmarks, 1, 1, 0, &mut head_rng);
        Ok(Self {
            drop1: Dropout::new(config.dropout),
            drop2: Dropout::new(config.dropout),
            config,
            entry_conv,
            entry_res,
            entry_pool: MaxPool2::default(),
            entry_blocks,
            hourglass,
            mix1,
            mix2,
            head,
            soft_argmax: None,
            last_heatmap: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Enables the input gradient of the first convolution (only needed when
    /// differentiating with respect to the image).
    pub fn set_input_grad(&mut self, on: bool) {
        self.entry_conv.need_input_grad = on;
    }

    /// Runs the network on a `(batch, 1, S, S)` tensor and returns
    /// `(batch, M, 2)` normalised coordinates.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let [_, c, h, w] = x.dims4()?;
        let s = self.config.input_size;
        if c != 1 || h != s || w != s {
            return Err(Error::Shape(format!(
                "model expects (batch, 1, {s}, {s}) input, got {:?}",
                x.shape()
            )));
        }
        let y = self.entry_conv.forward(x, mode, rng)?;
        let y = self.entry_res.forward(&y, mode, rng)?;
        let y = self.entry_pool.forward(&y, mode, rng)?;
        let y = run_blocks(&mut self.entry_blocks, y, mode, rng)?;
        let y = self.hourglass.forward(&y, mode, rng)?;
        let y = self.drop1.forward(&y, mode, rng)?;
        let y = self.mix1.forward(&y, mode, rng)?;
        let y = self.drop2.forward(&y, mode, rng)?;
        let y = self.mix2.forward(&y, mode, rng)?;
        let heatmap = self.head.forward(&y, mode, rng)?;
        let (coords, probs) = ops::soft_argmax_forward(&heatmap, self.config.beta)?;
        self.soft_argmax = Some((probs, coords.clone()));
        self.last_heatmap = Some(heatmap);
        Ok(coords)
    }

    /// Heatmap produced by the most recent forward pass.
    pub fn last_heatmap(&self) -> Option<&Tensor<T>> {
        self.last_heatmap.as_ref()
    }

    /// Back-propagates `d loss / d coords` through the most recent forward pass,
    /// accumulating gradients into every trainable parameter. Returns the
    /// gradient with respect to the input (zeros unless enabled).
    pub fn backward(&mut self, dcoords: &Tensor<T>) -> Result<Tensor<T>> {
        let (probs, coords) = self
            .soft_argmax
            .take()
            .ok_or_else(|| Error::InvalidArgument("model backward called before forward".into()))?;
        let d = ops::soft_argmax_backward(dcoords, &probs, &coords, self.config.beta)?;
        let d = self.head.backward(&d)?;
        let d = self.mix2.backward(&d)?;
        let d = self.drop2.backward(&d)?;
        let d = self.mix1.backward(&d)?;
        let d = self.drop1.backward(&d)?;
        let d = self.hourglass.backward(&d)?;
        let d = back_blocks(&mut self.entry_blocks, d)?;
        let d = Module::<T>::backward(&mut self.entry_pool, &d)?;
        let d = self.entry_res.backward(&d)?;
        self.entry_conv.backward(&d)
    }

    /// Visits every named array (trainable parameters and batch-norm buffers)
    /// in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.entry_conv.visit("entry.conv", f);
        self.entry_res.visit("entry.res.0", f);
        for (i, b) in self.entry_blocks.iter().enumerate() {
            b.visit(&format!("entry.res.{}", i + 1), f);
        }
        self.hourglass.visit("", f);
        self.mix1.visit("out.mix.0", f);
        self.mix2.visit("out.mix.1", f);
        self.head.visit(HEAD_PREFIX, f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.entry_conv.visit_mut("entry.conv", f);
        self.entry_res.visit_mut("entry.res.0", f);
        for (i, b) in self.entry_blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("entry.res.{}", i + 1), f);
        }
        self.hourglass.visit_mut("", f);
        self.mix1.visit_mut("out.mix.0", f);
        self.mix2.visit_mut("out.mix.1", f);
        self.head.visit_mut(HEAD_PREFIX, f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, p| {
            if p.trainable {
                out.push(n.to_string())
            }
        });
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, p| {
            if p.trainable {
                total += p.value.len()
            }
        });
        total
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, p| {
            if p.trainable {
                p.zero_grad()
            }
        });
    }

    /// Copies all arrays into a model of another precision.
    pub fn cast<U: Float>(&self, seed: u64) -> Result<HourglassModel<U>> {
        let mut values = Vec::new();
        self.visit(&mut |_, p| values.push(p.value.cast::<U>()));
        let mut out = HourglassModel::<U>::new(self.config.clone(), seed)?;
        let mut it = values.into_iter();
        out.visit_mut(&mut |_, p| p.value = it.next().expect("same layout"));
        Ok(out)
    }
}

impl<T: Float> Module<T> for HourglassModel<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        HourglassModel::forward(self, x, mode, rng)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        HourglassModel::backward(self, dy)
    }

    fn visit(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        HourglassModel::visit(self, f)
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        HourglassModel::visit_mut(self, f)
    }
}
