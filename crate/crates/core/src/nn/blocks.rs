//! Pre-activation residual blocks.

use serde::{Deserialize, Serialize};

use super::layers::{join, BatchNorm2d, Conv2d, Module, Relu};
use super::ops::{self, Mode};
use super::tensor::{Float, Param, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Hierarchical multi-scale parallel block.
    Hmp,
    Bottleneck,
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hmp" => Ok(BlockKind::Hmp),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            other => Err(Error::Config(format!("unknown block kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockKind::Hmp => "hmp",
            BlockKind::Bottleneck => "bottleneck",
        })
    }
}

/// batch-norm -> ReLU -> convolution
pub struct PreActConv<T> {
    pub bn: BatchNorm2d<T>,
    relu: Relu<T>,
    pub conv: Conv2d<T>,
}

impl<T: Float> PreActConv<T> {
    pub fn new(n: usize, m: usize, kernel: usize, rng: &mut Rng) -> Self {
        Self {
            bn: BatchNorm2d::new(n),
            relu: Relu::default(),
            conv: Conv2d::new(n, m, kernel, 1, kernel / 2, rng),
        }
    }
}

impl<T: Float> Module<T> for PreActConv<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let y = self.bn.forward(x, mode, rng)?;
        let y = self.relu.forward(&y, mode, rng)?;
        self.conv.forward(&y, mode, rng)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.conv.backward(dy)?;
        let d = self.relu.backward(&d)?;
        self.bn.backward(&d)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.bn.visit(&join(prefix, "bn"), f);
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

/// Residual block `n -> m` channels at constant spatial size. The skip path is
/// the identity when `n == m` and a 1x1 convolution otherwise.
pub struct ResidualBlock<T> {
    kind: BlockKind,
    branches: [PreActConv<T>; 3],
    skip: Option<Conv2d<T>>,
    widths: [usize; 3],
}

impl<T: Float> ResidualBlock<T> {
    pub fn new(kind: BlockKind, n: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        match kind {
            BlockKind::Hmp => Self::hmp(n, m, rng),
            BlockKind::Bottleneck => Self::bottleneck(n, m, rng),
        }
    }

    /// Three cascaded 3x3 stages of widths `m/2, m/4, m/4` whose outputs are
    /// concatenated back to `m` channels.
    pub fn hmp(n: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 || !m.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "HMP block output width {m} must be a positive multiple of 4"
            )));
        }
        let widths = [m / 2, m / 4, m / 4];
        let branches = [
            PreActConv::new(n, widths[0], 3, rng),
            PreActConv::new(widths[0], widths[1], 3, rng),
            PreActConv::new(widths[1], widths[2], 3, rng),
        ];
        let skip = (n != m).then(|| Conv2d::new(n, m, 1, 1, 0, rng));
        Ok(Self {
            kind: BlockKind::Hmp,
            branches,
            skip,
            widths,
        })
    }

    /// 1x1 (m/2) -> 3x3 (m/2) -> 1x1 (m).
    pub fn bottleneck(n: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        if m == 0 || !m.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "bottleneck block output width {m} must be a positive even number"
            )));
        }
        let branches = [
            PreActConv::new(n, m / 2, 1, rng),
            PreActConv::new(m / 2, m / 2, 3, rng),
            PreActConv::new(m / 2, m, 1, rng),
        ];
        let skip = (n != m).then(|| Conv2d::new(n, m, 1, 1, 0, rng));
        Ok(Self {
            kind: BlockKind::Bottleneck,
            branches,
            skip,
            widths: [m / 2, m / 2, m],
        })
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    /// Output widths of the three convolution stages.
    pub fn stage_widths(&self) -> [usize; 3] {
        self.widths
    }

    pub fn has_projection(&self) -> bool {
        self.skip.is_some()
    }

    /// Sets every convolution kernel and bias in the block to zero.
    pub fn zero_convolutions(&mut self) {
        self.visit_mut("", &mut |name, p| {
            if name.contains("conv") || name.starts_with("skip") {
                p.value.fill(T::zero());
            }
        });
    }
}

impl<T: Float> Module<T> for ResidualBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        let residual = match self.kind {
            BlockKind::Hmp => {
                let o1 = self.branches[0].forward(x, mode, rng)?;
                let o2 = self.branches[1].forward(&o1, mode, rng)?;
                let o3 = self.branches[2].forward(&o2, mode, rng)?;
                ops::concat_channels(&[&o1, &o2, &o3])?
            }
            BlockKind::Bottleneck => {
                let y = self.branches[0].forward(x, mode, rng)?;
                let y = self.branches[1].forward(&y, mode, rng)?;
                self.branches[2].forward(&y, mode, rng)?
            }
        };
        let skip = match self.skip.as_mut() {
            Some(conv) => conv.forward(x, mode, rng)?,
            None => x.clone(),
        };
        ops::add(&residual, &skip)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut dx = match self.kind {
            BlockKind::Hmp => {
                let parts = ops::split_channels(dy, &self.widths)?;
                let [d1, d2, d3]: [Tensor<T>; 3] = parts.try_into().expect("three parts");
                let mut d2 = d2;
                d2.add_assign(&self.branches[2].backward(&d3)?);
                let mut d1 = d1;
                d1.add_assign(&self.branches[1].backward(&d2)?);
                self.branches[0].backward(&d1)?
            }
            BlockKind::Bottleneck => {
                let d = self.branches[2].backward(dy)?;
                let d = self.branches[1].backward(&d)?;
                self.branches[0].backward(&d)?
            }
        };
        match self.skip.as_mut() {
            Some(conv) => dx.add_assign(&conv.backward(dy)?),
            None => dx.add_assign(dy),
        }
        Ok(dx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch{}", i + 1)), f);
        }
        if let Some(s) = &self.skip {
            s.visit(&join(prefix, "skip"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch{}", i + 1)), f);
        }
        if let Some(s) = self.skip.as_mut() {
            s.visit_mut(&join(prefix, "skip"), f);
        }
    }
}
