//! Coordinate regression losses and MixUp.
//!
//! Every loss is the mean over all elements (batch x landmarks x 2).

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::nn::{Float, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Wing loss parameters. `c` is always derived so the two branches meet at
/// `|d| = w`: `c = w - w ln(1 + w / eps)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WingParams {
    pub w: f64,
    pub eps: f64,
    pub c: f64,
}

impl WingParams {
    pub fn from_w_eps(w: f64, eps: f64) -> Result<Self> {
        if !(w > 0.0 && w.is_finite() && eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!(
                "wing needs w > 0 and eps > 0, got w={w}, eps={eps}"
            )));
        }
        Ok(Self {
            w,
            eps,
            c: w - w * (w / eps).ln_1p(),
        })
    }

    /// Solves the continuity condition for `eps`: `eps = w / (exp((w - c) / w) - 1)`.
    pub fn from_w_c(w: f64, c: f64) -> Result<Self> {
        if !(w > 0.0 && w.is_finite() && c < w && c.is_finite()) {
            return Err(Error::Config(format!(
                "wing needs w > 0 and C < w, got w={w}, C={c}"
            )));
        }
        let eps = w / ((w - c) / w).exp_m1();
        Ok(Self { w, eps, c })
    }

    pub fn value(&self, d: f64) -> f64 {
        let a = d.abs();
        if a < self.w {
            self.w * (a / self.eps).ln_1p()
        } else {
            a - self.c
        }
    }

    /// Derivative in `d`; the linear-branch slope is used at `|d| = w`.
    pub fn slope(&self, d: f64) -> f64 {
        let a = d.abs();
        let mag = if a < self.w {
            self.w / (self.eps + a)
        } else {
            1.0
        };
        sign(d) * mag
    }
}

impl Default for WingParams {
    fn default() -> Self {
        Self::from_w_c(15.0, 3.0).expect("valid defaults")
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Wing(WingParams),
    L1,
    L2,
    Elastic,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Wing(WingParams::default())
    }
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Wing(_) => "wing",
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
            LossKind::Elastic => "elastic",
        }
    }

    fn value(&self, d: f64) -> f64 {
        match self {
            LossKind::Wing(p) => p.value(d),
            LossKind::L1 => d.abs(),
            LossKind::L2 => d * d,
            LossKind::Elastic => d.abs() + d * d,
        }
    }

    fn slope(&self, d: f64) -> f64 {
        match self {
            LossKind::Wing(p) => p.slope(d),
            LossKind::L1 => sign(d),
            LossKind::L2 => 2.0 * d,
            LossKind::Elastic => sign(d) + 2.0 * d,
        }
    }
}

/// A loss applied to coordinate differences multiplied by `scale` (the
/// heatmap side when losses are measured in heatmap pixels, 1 otherwise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub kind: LossKind,
    pub scale: f64,
}

impl Criterion {
    pub fn new(kind: LossKind, scale: f64) -> Self {
        Self { kind, scale }
    }

    pub fn loss(&self, pred: &[f64], target: &[f64]) -> Result<f64> {
        check_lengths(pred.len(), target.len())?;
        if pred.is_empty() {
            return Ok(0.0);
        }
        let total: f64 = pred
            .iter()
            .zip(target)
            .map(|(p, t)| self.kind.value(self.scale * (p - t)))
            .sum();
        Ok(total / pred.len() as f64)
    }

    /// Mean loss and its gradient with respect to `pred`.
    pub fn loss_and_grad<T: Float>(
        &self,
        pred: &Tensor<T>,
        target: &Tensor<T>,
    ) -> Result<(f64, Tensor<T>)> {
        if pred.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "loss: prediction {:?} vs target {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        let n = pred.len().max(1) as f64;
        let mut total = 0.0;
        let mut grad = Tensor::zeros(pred.shape());
        for ((g, &p), &t) in grad
            .data_mut()
            .iter_mut()
            .zip(pred.data())
            .zip(target.data())
        {
            let d = self.scale * (p.as_f64() - t.as_f64());
            total += self.kind.value(d);
            *g = T::of(self.scale * self.kind.slope(d) / n);
        }
        Ok((total / n, grad))
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "loss: {a} predictions vs {b} targets"
        )));
    }
    Ok(())
}

pub fn wing_loss(pred: &[f64], target: &[f64], params: WingParams) -> Result<f64> {
    Criterion::new(LossKind::Wing(params), 1.0).loss(pred, target)
}

pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    Criterion::new(LossKind::L1, 1.0).loss(pred, target)
}

pub fn l2_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    Criterion::new(LossKind::L2, 1.0).loss(pred, target)
}

pub fn elastic_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    Criterion::new(LossKind::Elastic, 1.0).loss(pred, target)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixupDraw {
    pub lambda: f64,
    /// `max(lambda, 1 - lambda)`, the weight of the unpermuted batch.
    pub lambda_prime: f64,
    pub permutation: Vec<usize>,
}

impl MixupDraw {
    pub fn from_lambda(lambda: f64, permutation: Vec<usize>) -> Self {
        Self {
            lambda,
            lambda_prime: lambda.max(1.0 - lambda),
            permutation,
        }
    }

    /// Draws `lambda ~ Beta(alpha, alpha)` and a shuffled batch order. A batch of
    /// one keeps the identity order, which makes mixing a no-op.
    pub fn sample(batch: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        let beta = Beta::new(alpha, alpha)
            .map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
        let lambda = beta.sample(rng);
        let mut permutation: Vec<usize> = (0..batch).collect();
        if batch > 1 {
            permutation.shuffle(rng);
        }
        Ok(Self::from_lambda(lambda, permutation))
    }
}

/// Gathers the leading-axis rows of `t` in the order `perm`.
pub fn permute_batch<T: Float>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let b = t.shape().first().copied().unwrap_or(0);
    if perm.len() != b || perm.iter().any(|&i| i >= b) {
        return Err(Error::Shape(format!(
            "permutation of length {} for batch {b}",
            perm.len()
        )));
    }
    let row = t.len().checked_div(b).unwrap_or(0);
    let mut data = Vec::with_capacity(t.len());
    for &i in perm {
        data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    Tensor::new(t.shape().to_vec(), data)
}

/// `lambda' * x + (1 - lambda') * x[perm]`.
pub fn mix_inputs<T: Float>(x: &Tensor<T>, draw: &MixupDraw) -> Result<Tensor<T>> {
    let x2 = permute_batch(x, &draw.permutation)?;
    let a = T::of(draw.lambda_prime);
    let b = T::of(1.0 - draw.lambda_prime);
    let data = x
        .data()
        .iter()
        .zip(x2.data())
        .map(|(&u, &v)| a * u + b * v)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub struct MixedBatch<T> {
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
    pub permuted_targets: Tensor<T>,
    pub draw: MixupDraw,
}

/// Builds the mixed inputs for one mini-batch; targets are returned unmixed.
pub fn mixup_batch<T: Float>(
    x: &Tensor<T>,
    targets: &Tensor<T>,
    alpha: f64,
    rng: &mut Rng,
) -> Result<MixedBatch<T>> {
    let b = x.shape().first().copied().unwrap_or(0);
    let draw = MixupDraw::sample(b, alpha, rng)?;
    Ok(MixedBatch {
        inputs: mix_inputs(x, &draw)?,
        permuted_targets: permute_batch(targets, &draw.permutation)?,
        targets: targets.clone(),
        draw,
    })
}

/// `lambda' * L(p1, o1) + (1 - lambda') * L(p2, o_mixed)`.
pub fn mixup_criterion(plain_loss: f64, mixed_loss: f64, lambda_prime: f64) -> f64 {
    if lambda_prime == 1.0 {
        return plain_loss;
    }
    lambda_prime * plain_loss + (1.0 - lambda_prime) * mixed_loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn wing_constants_from_w_and_c() {
        let p = WingParams::from_w_c(15.0, 3.0).unwrap();
        assert!((p.eps - 12.2395).abs() < 1e-3, "{}", p.eps);
        let inner = p.w * (p.w / p.eps).ln_1p();
        assert!((inner - 12.0).abs() < 1e-9);
        assert!((p.value(15.0) - 12.0).abs() < 1e-9);
        assert_eq!(p.value(100.0), 97.0);
        assert_eq!(p.value(0.0), 0.0);
        assert!(WingParams::from_w_c(15.0, 15.0).is_err());
    }

    #[test]
    fn simple_losses() {
        assert_eq!(l1_loss(&[2.0], &[0.0]).unwrap(), 2.0);
        assert_eq!(l2_loss(&[2.0], &[0.0]).unwrap(), 4.0);
        assert_eq!(elastic_loss(&[2.0], &[0.0]).unwrap(), 6.0);
        assert_eq!(elastic_loss(&[1.0, 3.0], &[1.0, 3.0]).unwrap(), 0.0);
        assert!(l1_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mixup_examples() {
        let d = MixupDraw::from_lambda(0.3, vec![1, 0]);
        assert!((d.lambda_prime - 0.7).abs() < 1e-15);
        assert!((mixup_criterion(2.0, 1.0, 0.7) - 1.7).abs() < 1e-12);
        assert_eq!(mixup_criterion(2.0, 5.0, 1.0), 2.0);
        let x = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mixed = mix_inputs(&x, &d).unwrap();
        assert!((mixed.data()[0] - (0.7 + 0.3 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn single_sample_batch_is_unmixed() {
        let mut r = rng::stream(1, &[]);
        let x = Tensor::new(vec![1, 2], vec![0.25f32, 0.5]).unwrap();
        let m = mixup_batch(&x, &x, 0.75, &mut r).unwrap();
        assert_eq!(m.draw.permutation, vec![0]);
        assert_eq!(m.inputs, x);
    }
}
