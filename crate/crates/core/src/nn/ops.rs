//! Differentiable primitives as explicit forward / backward pairs.
//!
//! Layers in [`super::layers`] own parameters and caches and call into these.
//! Activations are `(batch, channels, height, width)`, row-major, so a pixel
//! at column `i` and row `j` of plane `(b, c)` lives at `((b*C + c)*H + j)*W + i`.

use rand::Rng as _;

use super::tensor::{Float, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn conv_geometry<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<([usize; 4], usize, ConvGeom)> {
    let [b, c, h, w] = x.dims4()?;
    let [o, wc, kh, kw] = weight.dims4()?;
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d: input has {c} channels but kernel expects {wc}"
        )));
    }
    if kh != kw {
        return Err(Error::Shape(format!("conv2d: non-square kernel {kh}x{kw}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(Error::Shape(format!(
            "conv2d: kernel {kh} larger than padded input {h}x{w} (pad {pad})"
        )));
    };
    Ok((
        [b, c, h, w],
        o,
        ConvGeom {
            c,
            h,
            w,
            k: kh,
            stride,
            pad,
            oh,
            ow,
        },
    ))
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y[o] = sum_c w[o, c] * x[c] + b[o]` with zero padding.
pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let ([b, ..], o, g) = conv_geometry(x, weight, stride, pad)?;
    if let Some(bias) = bias {
        if bias.shape() != [o] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {o} output channels",
                bias.shape()
            )));
        }
    }
    let (rows, p) = (g.rows(), g.positions());
    let in_len = g.c * g.h * g.w;
    let mut out = Tensor::zeros(&[b, o, g.oh, g.ow]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    for n in 0..b {
        let xb = &x.data()[n * in_len..(n + 1) * in_len];
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        let yb = &mut out.data_mut()[n * o * p..(n + 1) * o * p];
        if let Some(bias) = bias {
            for (oc, chunk) in yb.chunks_exact_mut(p).enumerate() {
                chunk.fill(bias.data()[oc]);
            }
        }
        T::gemm(
            o,
            rows,
            p,
            T::one(),
            weight.data(),
            (rows, 1),
            cols_ref,
            (p, 1),
            T::one(),
            yb,
            (p, 1),
        );
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let ([b, ..], o, g) = conv_geometry(x, weight, stride, pad)?;
    if dy.shape() != [b, o, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "conv2d backward: gradient shape {:?}, expected {:?}",
            dy.shape(),
            [b, o, g.oh, g.ow]
        )));
    }
    let (rows, p) = (g.rows(), g.positions());
    let in_len = g.c * g.h * g.w;
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros(&[o]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    let mut dcols = if need_dx && !g.is_pointwise() {
        vec![T::zero(); rows * p]
    } else {
        Vec::new()
    };
    for n in 0..b {
        let xb = &x.data()[n * in_len..(n + 1) * in_len];
        let dyb = &dy.data()[n * o * p..(n + 1) * o * p];
        let cols_ref: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        // dW += dY (o x p) . cols^T (p x rows)
        T::gemm(
            o,
            p,
            rows,
            T::one(),
            dyb,
            (p, 1),
            cols_ref,
            (1, p),
            T::one(),
            dweight.data_mut(),
            (rows, 1),
        );
        for (oc, chunk) in dyb.chunks_exact(p).enumerate() {
            dbias.data_mut()[oc] += chunk.iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                // dX = W^T (rows x o) . dY (o x p)
                T::gemm(
                    rows,
                    o,
                    p,
                    T::one(),
                    weight.data(),
                    (1, rows),
                    dyb,
                    (p, 1),
                    T::zero(),
                    dxb,
                    (p, 1),
                );
            } else {
                T::gemm(
                    rows,
                    o,
                    p,
                    T::one(),
                    weight.data(),
                    (1, rows),
                    dyb,
                    (p, 1),
                    T::zero(),
                    &mut dcols,
                    (p, 1),
                );
                col2im(&dcols, &g, dxb);
            }
        }
    }
    Ok(ConvGrads { dx, dweight, dbias })
}

/// Per-channel quantities saved by a training-mode batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

fn check_bn_params<T: Float>(x: &Tensor<T>, params: &[&Tensor<T>]) -> Result<[usize; 4]> {
    let dims = x.dims4()?;
    for p in params {
        if p.shape() != [dims[1]] {
            return Err(Error::Shape(format!(
                "batchnorm: parameter of shape {:?} for {} channels",
                p.shape(),
                dims[1]
            )));
        }
    }
    Ok(dims)
}

/// Normalises each channel by the statistics of the current batch.
pub fn batchnorm_train_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>, BatchStats)> {
    let [b, c, h, w] = check_bn_params(x, &[gamma, beta])?;
    let plane = h * w;
    let count = b * plane;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for n in 0..b {
            let off = (n * c + ch) * plane;
            s += x.data()[off..off + plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let m = s / count as f64;
        let mut sq = 0.0f64;
        for n in 0..b {
            let off = (n * c + ch) * plane;
            sq += x.data()[off..off + plane]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / count as f64;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = vec![T::zero(); x.len()];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let m = T::of(mean[ch]);
            let (g, bt, is) = (gamma.data()[ch], beta.data()[ch], inv_std[ch]);
            for i in off..off + plane {
                let xh = (x.data()[i] - m) * is;
                xhat[i] = xh;
                y.data_mut()[i] = g * xh + bt;
            }
        }
    }
    Ok((
        y,
        BatchNormCache { xhat, inv_std },
        BatchStats { mean, var, count },
    ))
}

pub fn batchnorm_train_backward<T: Float>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = check_bn_params(dy, &[gamma])?;
    let plane = h * w;
    let count = T::of((b * plane) as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..b {
            let off = (n * c + ch) * plane;
            for i in off..off + plane {
                let g = dy.data()[i];
                sum_dy += g;
                sum_dy_xhat += g * cache.xhat[i];
            }
        }
        dbeta.data_mut()[ch] = sum_dy;
        dgamma.data_mut()[ch] = sum_dy_xhat;
        let k = gamma.data()[ch] * cache.inv_std[ch] / count;
        for n in 0..b {
            let off = (n * c + ch) * plane;
            for i in off..off + plane {
                dx.data_mut()[i] =
                    k * (count * dy.data()[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Normalises with fixed (running) statistics.
pub fn batchnorm_eval_forward<T: Float>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [b, c, h, w] = check_bn_params(x, &[gamma, beta, running_mean, running_var])?;
    let plane = h * w;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::of(1.0 / (v.as_f64() + eps).sqrt()))
        .collect();
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = vec![T::zero(); x.len()];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let m = running_mean.data()[ch];
            for i in off..off + plane {
                let xh = (x.data()[i] - m) * inv_std[ch];
                xhat[i] = xh;
                y.data_mut()[i] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok((y, BatchNormCache { xhat, inv_std }))
}

pub fn batchnorm_eval_backward<T: Float>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = check_bn_params(dy, &[gamma])?;
    let plane = h * w;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * plane;
            let k = gamma.data()[ch] * cache.inv_std[ch];
            for i in off..off + plane {
                let g = dy.data()[i];
                dx.data_mut()[i] = g * k;
                dgamma.data_mut()[ch] += g * cache.xhat[i];
                dbeta.data_mut()[ch] += g;
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn relu_forward<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Float>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(dy.shape().to_vec(), data).expect("same shape")
}

/// 2x2 max pooling with stride 2. Returns the output and the flat input index
/// of each window's maximum (first maximum on ties).
pub fn maxpool2_forward<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2 needs even sides, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut idx = vec![0usize; b * c * oh * ow];
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = xd[best];
                idx[o] = best;
            }
        }
    }
    Ok((out, idx))
}

pub fn maxpool2_backward<T: Float>(
    dy: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&g, &i) in dy.data().iter().zip(argmax) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, v) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *v = row[ox / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample2_backward<T: Float>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, oh, ow] = dy.dims4()?;
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    for plane in 0..b * c {
        let src = &dy.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
            }
        }
    }
    Ok(dx)
}

/// Inverted dropout: in training, zero each element with probability `p` and
/// scale survivors by `1 / (1 - p)`. Identity in eval mode or when `p == 0`.
/// Returns the per-element multiplier when one was applied.
pub fn dropout_forward<T: Float>(
    x: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> (Tensor<T>, Option<Vec<T>>) {
    if mode == Mode::Eval || p == 0.0 {
        return (x.clone(), None);
    }
    let keep = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
    (
        Tensor::new(x.shape().to_vec(), data).expect("same shape"),
        Some(mask),
    )
}

pub fn dropout_backward<T: Float>(dy: &Tensor<T>, mask: Option<&[T]>) -> Tensor<T> {
    match mask {
        None => dy.clone(),
        Some(mask) => {
            let data = dy.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
            Tensor::new(dy.shape().to_vec(), data).expect("same shape")
        }
    }
}

/// Spatial soft-argmax. For each `(batch, channel)` heatmap `h` of size `H x W`:
/// `phi = softmax(beta * h)` over all pixels and the output is
/// `(sum_ij phi_ij * i / W, sum_ij phi_ij * j / H)` where `i` is the column.
///
/// Returns coordinates of shape `(batch, channels, 2)` and the softmax weights.
pub fn soft_argmax_forward<T: Float>(h: &Tensor<T>, beta: f64) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, m, hh, ww] = h.dims4()?;
    let plane = hh * ww;
    let beta_t = T::of(beta);
    let mut probs = Tensor::zeros(h.shape());
    let mut coords = Tensor::zeros(&[b, m, 2]);
    let (inv_w, inv_h) = (T::of(1.0 / ww as f64), T::of(1.0 / hh as f64));
    for p in 0..b * m {
        let src = &h.data()[p * plane..(p + 1) * plane];
        let max = src
            .iter()
            .map(|&v| beta_t * v)
            .fold(T::neg_infinity(), |a, v| if v > a { v } else { a });
        let dst = &mut probs.data_mut()[p * plane..(p + 1) * plane];
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (beta_t * v - max).exp();
            total += *d;
        }
        let mut ex = T::zero();
        let mut ey = T::zero();
        for j in 0..hh {
            for i in 0..ww {
                let k = j * ww + i;
                dst[k] /= total;
                ex += dst[k] * T::of(i as f64) * inv_w;
                ey += dst[k] * T::of(j as f64) * inv_h;
            }
        }
        coords.data_mut()[2 * p] = ex;
        coords.data_mut()[2 * p + 1] = ey;
    }
    Ok((coords, probs))
}

pub fn soft_argmax_backward<T: Float>(
    dcoords: &Tensor<T>,
    probs: &Tensor<T>,
    coords: &Tensor<T>,
    beta: f64,
) -> Result<Tensor<T>> {
    let [b, m, hh, ww] = probs.dims4()?;
    if dcoords.shape() != [b, m, 2] {
        return Err(Error::Shape(format!(
            "soft-argmax backward: gradient shape {:?}, expected {:?}",
            dcoords.shape(),
            [b, m, 2]
        )));
    }
    let plane = hh * ww;
    let beta_t = T::of(beta);
    let (inv_w, inv_h) = (T::of(1.0 / ww as f64), T::of(1.0 / hh as f64));
    let mut dh = Tensor::zeros(probs.shape());
    for p in 0..b * m {
        let gx = dcoords.data()[2 * p];
        let gy = dcoords.data()[2 * p + 1];
        let ex = coords.data()[2 * p];
        let ey = coords.data()[2 * p + 1];
        let phi = &probs.data()[p * plane..(p + 1) * plane];
        let dst = &mut dh.data_mut()[p * plane..(p + 1) * plane];
        for j in 0..hh {
            for i in 0..ww {
                let k = j * ww + i;
                let wx = T::of(i as f64) * inv_w;
                let wy = T::of(j as f64) * inv_h;
                dst[k] = beta_t * phi[k] * (gx * (wx - ex) + gy * (wy - ey));
            }
        }
    }
    Ok(dh)
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let [b, _, h, w] = parts[0].dims4()?;
    let mut total_c = 0;
    for p in parts {
        let [pb, pc, ph, pw] = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::Shape(format!(
                "concat: {:?} does not match batch/spatial dims of {:?}",
                p.shape(),
                parts[0].shape()
            )));
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * total_c * plane);
    for n in 0..b {
        for p in parts {
            let pc = p.shape()[1];
            data.extend_from_slice(&p.data()[n * pc * plane..(n + 1) * pc * plane]);
        }
    }
    Tensor::new(vec![b, total_c, h, w], data)
}

/// Inverse of [`concat_channels`].
pub fn split_channels<T: Float>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [b, c, h, w] = x.dims4()?;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::Shape(format!(
            "split: widths {widths:?} do not sum to {c} channels"
        )));
    }
    let plane = h * w;
    let mut outs: Vec<Vec<T>> = widths
        .iter()
        .map(|&wc| Vec::with_capacity(b * wc * plane))
        .collect();
    for n in 0..b {
        let mut start = n * c * plane;
        for (o, &wc) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&x.data()[start..start + wc * plane]);
            start += wc * plane;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &wc)| Tensor::new(vec![b, wc, h, w], d))
        .collect()
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "add: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}
