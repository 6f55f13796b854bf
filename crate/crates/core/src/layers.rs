//! Layer definitions and their forward/backward math.
//!
//! All reductions run in a fixed loop order so results are bitwise
//! reproducible for identical inputs. Zero padding is implemented by
//! skipping out-of-range taps, which is numerically identical to summing
//! explicit zeros.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvParams {
    /// Output spatial dims: floor((n + 2p - k) / s) + 1, both >= 1 required.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = conv_out_dim(h, self.kernel_h, self.stride, self.padding)?;
        let ow = conv_out_dim(w, self.kernel_w, self.stride, self.padding)?;
        Ok((oh, ow))
    }
}

pub fn conv_out_dim(n: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = n + 2 * padding;
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "kernel and stride must be positive".into(),
        ));
    }
    if padded < kernel {
        return Err(Error::ShapeMismatch {
            context: "conv output dim",
            expected: format!("input+padding >= kernel {kernel}"),
            got: format!("{padded}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// The layer vocabulary the engine executes.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d { params: ConvParams, bias: bool },
    BatchNorm { channels: usize },
    ReLU,
    MaxPool { kernel: usize, stride: usize },
    AvgPool { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Dense { in_features: usize, out_features: usize },
    /// Element-wise sum of two equal-shaped inputs.
    Add,
    /// Places input channel `i` at output slot `positions[i]`, zeros elsewhere.
    /// Paired with a strided pool this forms a parameter-free shortcut.
    ChannelPad { out_channels: usize, positions: Vec<usize> },
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::GlobalAvgPool => "globalavgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Add => "add",
            LayerKind::ChannelPad { .. } => "channelpad",
            LayerKind::Softmax => "softmax",
        }
    }
}

fn expect_4d<'t, S: Scalar>(t: &'t Tensor<S>, context: &'static str) -> Result<&'t [usize]> {
    if t.shape().len() != 4 {
        return Err(Error::ShapeMismatch {
            context,
            expected: "4-D NCHW tensor".into(),
            got: format!("{:?}", t.shape()),
        });
    }
    Ok(t.shape())
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Raw (pre-activation) 2-D convolution. Input NCHW, weights KCHW.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    params: &ConvParams,
) -> Result<Tensor<S>> {
    let ishape = expect_4d(input, "conv2d input")?;
    let wshape = expect_4d(weights, "conv2d weights")?;
    let (batch, in_c, in_h, in_w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    if in_c != params.in_channels || wshape[1] != params.in_channels {
        return Err(Error::ShapeMismatch {
            context: "conv2d input channels",
            expected: format!("{}", params.in_channels),
            got: format!("input C={in_c}, weight C={}", wshape[1]),
        });
    }
    if wshape[0] != params.out_channels
        || wshape[2] != params.kernel_h
        || wshape[3] != params.kernel_w
    {
        return Err(Error::ShapeMismatch {
            context: "conv2d weight tensor",
            expected: format!(
                "[{}, {}, {}, {}]",
                params.out_channels, params.in_channels, params.kernel_h, params.kernel_w
            ),
            got: format!("{wshape:?}"),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [params.out_channels] {
            return Err(Error::ShapeMismatch {
                context: "conv2d bias",
                expected: format!("[{}]", params.out_channels),
                got: format!("{:?}", b.shape()),
            });
        }
    }
    let (out_h, out_w) = params.out_hw(in_h, in_w)?;
    let mut out = Tensor::zeros(&[batch, params.out_channels, out_h, out_w]);

    let k_h = params.kernel_h;
    let k_w = params.kernel_w;
    let stride = params.stride;
    let pad = params.padding;
    let w_data = weights.data();
    let x_data = input.data();
    let o_data = out.data_mut();
    // Tap-major accumulation: for each kernel tap, add w * (input row) onto
    // the output row. Every output element still receives its terms in the
    // fixed order bias, then (c, kh, kw), so results are deterministic.
    for n in 0..batch {
        for k in 0..params.out_channels {
            let b = bias.map_or(S::ZERO, |b| b.data()[k]);
            let obase = (n * params.out_channels + k) * out_h * out_w;
            o_data[obase..obase + out_h * out_w].fill(b);
            for c in 0..in_c {
                let xbase = (n * in_c + c) * in_h * in_w;
                let wbase = (k * in_c + c) * k_h * k_w;
                for kh in 0..k_h {
                    let (oh_lo, oh_hi) = tap_range(out_h, in_h, stride, pad, kh);
                    for kw in 0..k_w {
                        let w = w_data[wbase + kh * k_w + kw];
                        let (ow_lo, ow_hi) = tap_range(out_w, in_w, stride, pad, kw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let run = ow_hi - ow_lo;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + kh - pad;
                            let xrow = &x_data[xbase + ih * in_w..xbase + (ih + 1) * in_w];
                            let orow = &mut o_data[obase + oh * out_w..obase + (oh + 1) * out_w];
                            let x0 = ow_lo * stride + kw - pad;
                            if stride == 1 {
                                let xs = &xrow[x0..x0 + run];
                                let os = &mut orow[ow_lo..ow_lo + run];
                                for (o, x) in os.iter_mut().zip(xs) {
                                    *o += w * *x;
                                }
                            } else {
                                for (i, o) in orow[ow_lo..ow_hi].iter_mut().enumerate() {
                                    *o += w * xrow[x0 + i * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Output positions whose tap `tap` lands inside the unpadded input:
/// 0 <= pos * stride + tap - pad < in_dim, clamped to [0, out_dim).
#[inline]
fn tap_range(out_dim: usize, in_dim: usize, stride: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = if pad > tap {
        (pad - tap).div_ceil(stride)
    } else {
        0
    };
    let hi_num = in_dim as isize - 1 - tap as isize + pad as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride + 1).min(out_dim);
    (lo.min(hi), hi)
}

/// Gradients of a convolution: (d_input, d_weights, d_bias).
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    has_bias: bool,
    params: &ConvParams,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let ishape = expect_4d(input, "conv2d backward input")?;
    let (batch, in_c, in_h, in_w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let oshape = expect_4d(grad_out, "conv2d backward grad")?;
    let (out_c, out_h, out_w) = (oshape[1], oshape[2], oshape[3]);

    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weights = Tensor::zeros(weights.shape());
    let mut d_bias = if has_bias {
        Some(Tensor::zeros(&[out_c]))
    } else {
        None
    };

    let k_h = params.kernel_h;
    let k_w = params.kernel_w;
    let stride = params.stride;
    let pad = params.padding;
    let w_data = weights.data();
    let x_data = input.data();
    let g_data = grad_out.data();
    let dx = d_input.data_mut();
    let dw = d_weights.data_mut();
    for n in 0..batch {
        for k in 0..out_c {
            let gbase = (n * out_c + k) * out_h * out_w;
            if let Some(db) = d_bias.as_mut() {
                let slot = &mut db.data_mut()[k];
                for g in &g_data[gbase..gbase + out_h * out_w] {
                    *slot += *g;
                }
            }
            for c in 0..in_c {
                let xbase = (n * in_c + c) * in_h * in_w;
                let wbase = (k * in_c + c) * k_h * k_w;
                for kh in 0..k_h {
                    let (oh_lo, oh_hi) = tap_range(out_h, in_h, stride, pad, kh);
                    for kw in 0..k_w {
                        let w = w_data[wbase + kh * k_w + kw];
                        let (ow_lo, ow_hi) = tap_range(out_w, in_w, stride, pad, kw);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let run = ow_hi - ow_lo;
                        let mut dw_acc = S::ZERO;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * stride + kh - pad;
                            let grow = &g_data[gbase + oh * out_w..gbase + (oh + 1) * out_w];
                            let xrow = &x_data[xbase + ih * in_w..xbase + (ih + 1) * in_w];
                            let dxrow = &mut dx[xbase + ih * in_w..xbase + (ih + 1) * in_w];
                            let x0 = ow_lo * stride + kw - pad;
                            if stride == 1 {
                                let gs = &grow[ow_lo..ow_lo + run];
                                let dxs = &mut dxrow[x0..x0 + run];
                                for (d, g) in dxs.iter_mut().zip(gs) {
                                    *d += *g * w;
                                }
                                let xs = &xrow[x0..x0 + run];
                                for (g, x) in gs.iter().zip(xs) {
                                    dw_acc += *g * *x;
                                }
                            } else {
                                for (i, g) in grow[ow_lo..ow_hi].iter().enumerate() {
                                    let iw = x0 + i * stride;
                                    dxrow[iw] += *g * w;
                                    dw_acc += *g * xrow[iw];
                                }
                            }
                        }
                        dw[wbase + kh * k_w + kw] += dw_acc;
                    }
                }
            }
        }
    }
    Ok((d_input, d_weights, d_bias))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-channel batch statistics captured during a training-mode forward.
#[derive(Debug, Clone)]
pub struct BnBatchStats<S: Scalar> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

pub fn batchnorm_infer<S: Scalar>(
    input: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
) -> Result<Tensor<S>> {
    let shape = expect_4d(input, "batchnorm input")?;
    let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if gamma.len() != c {
        return Err(Error::ShapeMismatch {
            context: "batchnorm channels",
            expected: format!("{}", gamma.len()),
            got: format!("{c}"),
        });
    }
    let eps = S::from_f64(BN_EPS);
    let mut out = Tensor::zeros(input.shape());
    let x = input.data();
    let o = out.data_mut();
    for ch in 0..c {
        let inv = S::ONE / (running_var[ch] + eps).sqrt();
        let g = gamma[ch];
        let b = beta[ch];
        let m = running_mean[ch];
        for n in 0..batch {
            let base = (n * c + ch) * h * w;
            for i in 0..h * w {
                o[base + i] = (x[base + i] - m) * inv * g + b;
            }
        }
    }
    Ok(out)
}

/// Training-mode forward: normalizes with batch statistics (population
/// variance) and returns them for the running-average update.
pub fn batchnorm_train<S: Scalar>(
    input: &Tensor<S>,
    gamma: &[S],
    beta: &[S],
) -> Result<(Tensor<S>, BnBatchStats<S>)> {
    let shape = expect_4d(input, "batchnorm input")?;
    let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let count = S::from_f64((batch * h * w) as f64);
    let eps = S::from_f64(BN_EPS);
    let x = input.data();
    let mut mean = vec![S::ZERO; c];
    let mut var = vec![S::ZERO; c];
    for ch in 0..c {
        let mut sum = S::ZERO;
        for n in 0..batch {
            let base = (n * c + ch) * h * w;
            for i in 0..h * w {
                sum += x[base + i];
            }
        }
        let m = sum / count;
        let mut sq = S::ZERO;
        for n in 0..batch {
            let base = (n * c + ch) * h * w;
            for i in 0..h * w {
                let d = x[base + i] - m;
                sq += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = sq / count;
    }
    let mut out = Tensor::zeros(input.shape());
    let o = out.data_mut();
    for ch in 0..c {
        let inv = S::ONE / (var[ch] + eps).sqrt();
        for n in 0..batch {
            let base = (n * c + ch) * h * w;
            for i in 0..h * w {
                o[base + i] = (x[base + i] - mean[ch]) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    Ok((out, BnBatchStats { mean, var }))
}

/// Backward through training-mode batch norm.
/// Returns (d_input, d_gamma, d_beta).
pub fn batchnorm_train_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &[S],
    stats: &BnBatchStats<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
    let shape = expect_4d(input, "batchnorm backward")?;
    let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let count = S::from_f64((batch * h * w) as f64);
    let eps = S::from_f64(BN_EPS);
    let x = input.data();
    let g = grad_out.data();
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_gamma = vec![S::ZERO; c];
    let mut d_beta = vec![S::ZERO; c];
    let dx = d_input.data_mut();
    for ch in 0..c {
        let inv = S::ONE / (stats.var[ch] + eps).sqrt();
        let m = stats.mean[ch];
        // Accumulate the three reductions the classic formula needs.
        let mut sum_dy = S::ZERO;
        let mut sum_dy_xhat = S::ZERO;
        for n in 0..batch {
            let base = (n * c + ch) * h * w;
            for i in 0..h * w {
                let xhat = (x[base + i] - m) * inv;
                sum_dy += g[base + i];
                sum_dy_xhat += g[base + i] * xhat;
            }
        }
        d_gamma[ch] = sum_dy_xhat;
        d_beta[ch] = sum_dy;
        let scale = gamma[ch] * inv / count;
        for n in 0..batch {
            let base = (n * c + ch) * h * w;
            for i in 0..h * w {
                let xhat = (x[base + i] - m) * inv;
                dx[base + i] = scale * (count * g[base + i] - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    Ok((d_input, d_gamma, d_beta))
}

/// Backward through inference-mode batch norm (running stats are constants).
pub fn batchnorm_infer_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &[S],
    running_mean: &[S],
    running_var: &[S],
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Vec<S>, Vec<S>)> {
    let shape = expect_4d(input, "batchnorm backward")?;
    let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let eps = S::from_f64(BN_EPS);
    let x = input.data();
    let g = grad_out.data();
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_gamma = vec![S::ZERO; c];
    let mut d_beta = vec![S::ZERO; c];
    let dx = d_input.data_mut();
    for ch in 0..c {
        let inv = S::ONE / (running_var[ch] + eps).sqrt();
        for n in 0..batch {
            let base = (n * c + ch) * h * w;
            for i in 0..h * w {
                let xhat = (x[base + i] - running_mean[ch]) * inv;
                d_gamma[ch] += g[base + i] * xhat;
                d_beta[ch] += g[base + i];
                dx[base + i] = g[base + i] * gamma[ch] * inv;
            }
        }
    }
    Ok((d_input, d_gamma, d_beta))
}

// ---------------------------------------------------------------------------
// Activations and pooling
// ---------------------------------------------------------------------------

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(input.shape());
    for (o, x) in out.data_mut().iter_mut().zip(input.data()) {
        *o = x.maximum(S::ZERO);
    }
    out
}

pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let mut d = Tensor::zeros(input.shape());
    for ((d, x), g) in d.data_mut().iter_mut().zip(input.data()).zip(grad_out.data()) {
        *d = if *x > S::ZERO { *g } else { S::ZERO };
    }
    d
}

fn pool_out_dim(n: usize, kernel: usize, stride: usize) -> Result<usize> {
    if n < kernel {
        return Err(Error::ShapeMismatch {
            context: "pool window",
            expected: format!("input >= kernel {kernel}"),
            got: format!("{n}"),
        });
    }
    Ok((n - kernel) / stride + 1)
}

pub fn maxpool_forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<S>> {
    let shape = expect_4d(input, "maxpool input")?;
    let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = pool_out_dim(h, kernel, stride)?;
    let ow = pool_out_dim(w, kernel, stride)?;
    let mut out = Tensor::zeros(&[batch, c, oh, ow]);
    for n in 0..batch {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = input.at4(n, ch, y * stride, x * stride);
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let v = input.at4(n, ch, y * stride + ky, x * stride + kx);
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    *out.at4_mut(n, ch, y, x) = best;
                }
            }
        }
    }
    Ok(out)
}

/// Routes each output gradient to the first maximum in scan order.
pub fn maxpool_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: usize,
    stride: usize,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let shape = expect_4d(input, "maxpool backward")?;
    let (batch, c, _h, _w) = (shape[0], shape[1], shape[2], shape[3]);
    let oshape = grad_out.shape().to_vec();
    let (oh, ow) = (oshape[2], oshape[3]);
    let mut d = Tensor::zeros(input.shape());
    for n in 0..batch {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = input.at4(n, ch, y * stride, x * stride);
                    let mut arg = (y * stride, x * stride);
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let v = input.at4(n, ch, y * stride + ky, x * stride + kx);
                            if v > best {
                                best = v;
                                arg = (y * stride + ky, x * stride + kx);
                            }
                        }
                    }
                    *d.at4_mut(n, ch, arg.0, arg.1) += grad_out.at4(n, ch, y, x);
                }
            }
        }
    }
    Ok(d)
}

pub fn avgpool_forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<S>> {
    let shape = expect_4d(input, "avgpool input")?;
    let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = pool_out_dim(h, kernel, stride)?;
    let ow = pool_out_dim(w, kernel, stride)?;
    let norm = S::ONE / S::from_f64((kernel * kernel) as f64);
    let mut out = Tensor::zeros(&[batch, c, oh, ow]);
    for n in 0..batch {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = S::ZERO;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += input.at4(n, ch, y * stride + ky, x * stride + kx);
                        }
                    }
                    *out.at4_mut(n, ch, y, x) = acc * norm;
                }
            }
        }
    }
    Ok(out)
}

pub fn avgpool_backward<S: Scalar>(
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let oshape = grad_out.shape().to_vec();
    let (batch, c, oh, ow) = (oshape[0], oshape[1], oshape[2], oshape[3]);
    let norm = S::ONE / S::from_f64((kernel * kernel) as f64);
    let mut d = Tensor::zeros(input_shape);
    for n in 0..batch {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let g = grad_out.at4(n, ch, y, x) * norm;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            *d.at4_mut(n, ch, y * stride + ky, x * stride + kx) += g;
                        }
                    }
                }
            }
        }
    }
    Ok(d)
}

/// Spatial mean per channel; output is N x C.
pub fn global_avgpool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = expect_4d(input, "globalavgpool input")?;
    let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let norm = S::ONE / S::from_f64((h * w) as f64);
    let mut out = Tensor::zeros(&[batch, c]);
    for n in 0..batch {
        for ch in 0..c {
            let mut acc = S::ZERO;
            for y in 0..h {
                for x in 0..w {
                    acc += input.at4(n, ch, y, x);
                }
            }
            *out.at2_mut(n, ch) = acc * norm;
        }
    }
    Ok(out)
}

pub fn global_avgpool_backward<S: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (batch, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let norm = S::ONE / S::from_f64((h * w) as f64);
    let mut d = Tensor::zeros(input_shape);
    for n in 0..batch {
        for ch in 0..c {
            let g = grad_out.at2(n, ch) * norm;
            for y in 0..h {
                for x in 0..w {
                    *d.at4_mut(n, ch, y, x) = g;
                }
            }
        }
    }
    Ok(d)
}

pub fn flatten<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let shape = expect_4d(input, "flatten input")?;
    let features: usize = shape[1..].iter().product();
    input.reshaped(&[shape[0], features])
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

pub fn dense_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>> {
    if input.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "dense input",
            expected: "2-D (batch, features)".into(),
            got: format!("{:?}", input.shape()),
        });
    }
    let (batch, in_f) = (input.shape()[0], input.shape()[1]);
    let (out_f, w_in) = (weight.shape()[0], weight.shape()[1]);
    if in_f != w_in {
        return Err(Error::ShapeMismatch {
            context: "dense features",
            expected: format!("{w_in}"),
            got: format!("{in_f}"),
        });
    }
    let mut out = Tensor::zeros(&[batch, out_f]);
    for n in 0..batch {
        for o in 0..out_f {
            let mut acc = bias.data()[o];
            for i in 0..in_f {
                acc += weight.at2(o, i) * input.at2(n, i);
            }
            *out.at2_mut(n, o) = acc;
        }
    }
    Ok(out)
}

pub fn dense_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (batch, in_f) = (input.shape()[0], input.shape()[1]);
    let out_f = weight.shape()[0];
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(&[out_f]);
    for n in 0..batch {
        for o in 0..out_f {
            let g = grad_out.at2(n, o);
            d_bias.data_mut()[o] += g;
            for i in 0..in_f {
                *d_weight.at2_mut(o, i) += g * input.at2(n, i);
                *d_input.at2_mut(n, i) += g * weight.at2(o, i);
            }
        }
    }
    Ok((d_input, d_weight, d_bias))
}

// ---------------------------------------------------------------------------
// Residual add, channel pad, softmax
// ---------------------------------------------------------------------------

pub fn add_forward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: "residual add",
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let mut out = Tensor::zeros(a.shape());
    for ((o, x), y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *o = *x + *y;
    }
    Ok(out)
}

pub fn channel_pad_forward<S: Scalar>(
    input: &Tensor<S>,
    out_channels: usize,
    positions: &[usize],
) -> Result<Tensor<S>> {
    let shape = expect_4d(input, "channelpad input")?;
    let (batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if positions.len() != c {
        return Err(Error::ShapeMismatch {
            context: "channelpad positions",
            expected: format!("{c}"),
            got: format!("{}", positions.len()),
        });
    }
    if positions.iter().any(|&p| p >= out_channels) {
        return Err(Error::InvalidArgument(
            "channelpad position out of range".into(),
        ));
    }
    let mut out = Tensor::zeros(&[batch, out_channels, h, w]);
    for n in 0..batch {
        for (ci, &co) in positions.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    *out.at4_mut(n, co, y, x) = input.at4(n, ci, y, x);
                }
            }
        }
    }
    Ok(out)
}

pub fn channel_pad_backward<S: Scalar>(
    input_shape: &[usize],
    positions: &[usize],
    grad_out: &Tensor<S>,
) -> Tensor<S> {
    let (batch, _c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let mut d = Tensor::zeros(input_shape);
    for n in 0..batch {
        for (ci, &co) in positions.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    *d.at4_mut(n, ci, y, x) = grad_out.at4(n, co, y, x);
                }
            }
        }
    }
    d
}

/// Row-wise numerically stable softmax over a 2-D tensor.
pub fn softmax<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    if input.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            context: "softmax input",
            expected: "2-D (batch, classes)".into(),
            got: format!("{:?}", input.shape()),
        });
    }
    let (batch, classes) = (input.shape()[0], input.shape()[1]);
    let mut out = Tensor::zeros(input.shape());
    for n in 0..batch {
        let mut m = input.at2(n, 0);
        for c in 1..classes {
            m = m.maximum(input.at2(n, c));
        }
        let mut z = S::ZERO;
        for c in 0..classes {
            let e = (input.at2(n, c) - m).exp();
            *out.at2_mut(n, c) = e;
            z += e;
        }
        for c in 0..classes {
            *out.at2_mut(n, c) = out.at2(n, c) / z;
        }
    }
    Ok(out)
}

/// Jacobian-vector product of softmax: dx = p * (g - <g, p>) per row.
pub fn softmax_backward<S: Scalar>(output: &Tensor<S>, grad_out: &Tensor<S>) -> Tensor<S> {
    let (batch, classes) = (output.shape()[0], output.shape()[1]);
    let mut d = Tensor::zeros(output.shape());
    for n in 0..batch {
        let mut dot = S::ZERO;
        for c in 0..classes {
            dot += grad_out.at2(n, c) * output.at2(n, c);
        }
        for c in 0..classes {
            *d.at2_mut(n, c) = output.at2(n, c) * (grad_out.at2(n, c) - dot);
        }
    }
    d
}
