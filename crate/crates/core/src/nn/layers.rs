//! Per-layer forward and backward math.
//!
//! Layers operate on row-major `f64` tensors: dense layers on `[B, F]`,
//! conv layers on `[B, C, H, W]`. Convolutions are 3x3, "same" padded
//! (TensorFlow convention: output size `ceil(H / stride)`, surplus padding on
//! the bottom/right) and are lowered to im2col + matmul. Every reduction has
//! a fixed association order, so outputs are bitwise reproducible under any
//! thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, matmul_xt, Tensor};

/// Architecture description of a single layer. Parameter tensors live in
/// [`LayerParams`]; this is the serializable shape-level view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_width: usize,
        out_width: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    BatchNorm {
        momentum: f64,
        epsilon: f64,
    },
    Dropout {
        p: f64,
    },
    Flatten,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Output shape (per example) given the input shape, or a config error if
    /// the layer cannot follow it.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { in_width, out_width } => {
                if input != [*in_width] {
                    return Err(Error::Config(format!(
                        "dense layer expects input shape [{in_width}], got {input:?}"
                    )));
                }
                Ok(vec![*out_width])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if *kernel != 3 {
                    return Err(Error::Config(format!(
                        "conv kernels must be 3x3, got {kernel}x{kernel}"
                    )));
                }
                if *stride == 0 {
                    return Err(Error::Config("conv stride must be >= 1".into()));
                }
                match input {
                    [c, h, w] if c == in_channels => {
                        Ok(vec![*out_channels, h.div_ceil(*stride), w.div_ceil(*stride)])
                    }
                    _ => Err(Error::Config(format!(
                        "conv layer expects input shape [{in_channels}, H, W], got {input:?}"
                    ))),
                }
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::BatchNorm { momentum, epsilon } => {
                if *epsilon <= 0.0 {
                    return Err(Error::Config(format!(
                        "batchnorm epsilon must be > 0, got {epsilon}"
                    )));
                }
                if !(0.0..=1.0).contains(momentum) {
                    return Err(Error::Config(format!(
                        "batchnorm momentum must be in [0, 1], got {momentum}"
                    )));
                }
                if input.len() != 1 && input.len() != 3 {
                    return Err(Error::Config(format!(
                        "batchnorm expects a dense or conv input, got shape {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(p) {
                    return Err(Error::Config(format!(
                        "dropout p must be in [0, 1), got {p}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Parameter tensors for one layer. Weight layouts: dense `[out, in]`,
/// conv `[out_ch, in_ch, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Dense {
        weight: Tensor,
        bias: Tensor,
    },
    Conv2d {
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
    },
    None,
}

/// Gradients for one layer, shapes mirroring [`LayerParams`].
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Dense { d_weight: Tensor, d_bias: Tensor },
    Conv2d { d_weight: Tensor, d_bias: Tensor },
    BatchNorm { d_gamma: Tensor, d_beta: Tensor },
    None,
}

/// Values the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { patches: Tensor },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { mask: Vec<f64> },
    None,
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

pub fn dense_forward(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Tensor {
    let batch = x.batch();
    let out_w = weight.batch();
    let mut out = Tensor::zeros(&[batch, out_w]);
    matmul_xt(x, weight, &mut out.data);
    for row in out.data.chunks_mut(out_w) {
        for (v, b) in row.iter_mut().zip(&bias.data) {
            *v += b;
        }
    }
    out
}

/// Returns `(dx, d_weight, d_bias)`.
pub fn dense_backward(weight: &Tensor, x: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let batch = x.batch();
    let in_w = x.row_len();
    let out_w = weight.batch();

    // dx[b, :] = sum_o dy[b, o] * w[o, :]
    let mut dx = Tensor::zeros(&[batch, in_w]);
    dx.data
        .par_chunks_mut(in_w)
        .zip(dy.data.par_chunks(out_w))
        .for_each(|(dx_row, dy_row)| {
            for (o, &g) in dy_row.iter().enumerate() {
                if g != 0.0 {
                    axpy(g, weight.row(o), dx_row);
                }
            }
        });

    // dw[o, :] = sum_b dy[b, o] * x[b, :]
    let mut dw = Tensor::zeros(&[out_w, in_w]);
    dw.data
        .par_chunks_mut(in_w)
        .enumerate()
        .for_each(|(o, dw_row)| {
            for b in 0..batch {
                let g = dy.data[b * out_w + o];
                if g != 0.0 {
                    axpy(g, x.row(b), dw_row);
                }
            }
        });

    let mut db = Tensor::zeros(&[out_w]);
    for b in 0..batch {
        for (o, v) in db.data.iter_mut().enumerate() {
            *v += dy.data[b * out_w + o];
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Conv2d (3x3, "same" padding, integer stride)
// ---------------------------------------------------------------------------

/// Output spatial size and leading pad for "same" convolution.
fn same_geometry(size: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let pad_total = ((out - 1) * stride + kernel).saturating_sub(size);
    (out, pad_total / 2)
}

/// im2col: one row of length `in_ch * k * k` per output position, grouped by
/// image. Out-of-bounds taps read zero.
fn im2col(x: &Tensor, kernel: usize, stride: usize) -> Tensor {
    let (batch, in_ch, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (oh, pad_y) = same_geometry(h, kernel, stride);
    let (ow, pad_x) = same_geometry(w, kernel, stride);
    let row_len = in_ch * kernel * kernel;
    let rows_per_image = oh * ow;
    let mut patches = Tensor::zeros(&[batch * rows_per_image, row_len]);

    patches
        .data
        .par_chunks_mut(rows_per_image * row_len)
        .zip(x.data.par_chunks(in_ch * h * w))
        .for_each(|(block, image)| {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut block[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
                    let mut idx = 0;
                    for c in 0..in_ch {
                        let plane = &image[c * h * w..(c + 1) * h * w];
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad_y as isize;
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad_x as isize;
                                row[idx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize
                                {
                                    plane[iy as usize * w + ix as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                }
            }
        });
    patches
}

/// Returns `(output, patches)`; `patches` is the im2col matrix, cached for
/// the backward pass.
pub fn conv_forward(weight: &Tensor, bias: &Tensor, stride: usize, x: &Tensor) -> (Tensor, Tensor) {
    let batch = x.shape[0];
    let out_ch = weight.shape[0];
    let kernel = weight.shape[2];
    let (oh, _) = same_geometry(x.shape[2], kernel, stride);
    let (ow, _) = same_geometry(x.shape[3], kernel, stride);
    let hw = oh * ow;
    let row_len = weight.row_len(); // in_ch * k * k

    let patches = im2col(x, kernel, stride);
    let mut out = Tensor::zeros(&[batch, out_ch, oh, ow]);
    out.data
        .par_chunks_mut(out_ch * hw)
        .zip(patches.data.par_chunks(hw * row_len))
        .for_each(|(out_image, patch_block)| {
            for co in 0..out_ch {
                let w_row = weight.row(co);
                let b = bias.data[co];
                let plane = &mut out_image[co * hw..(co + 1) * hw];
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = dot(&patch_block[p * row_len..(p + 1) * row_len], w_row) + b;
                }
            }
        });
    (out, patches)
}

/// Returns `(dx, d_weight, d_bias)`.
pub fn conv_backward(
    weight: &Tensor,
    stride: usize,
    x_shape: &[usize],
    patches: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (batch, in_ch, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let out_ch = weight.shape[0];
    let kernel = weight.shape[2];
    let (oh, pad_y) = same_geometry(h, kernel, stride);
    let (ow, pad_x) = same_geometry(w, kernel, stride);
    let hw = oh * ow;
    let row_len = weight.row_len();

    // dw[co, :] = sum over images and positions of dy * patch; one serial
    // reduction per output channel.
    let mut dw = Tensor::zeros(&[out_ch, in_ch, kernel, kernel]);
    let mut db = Tensor::zeros(&[out_ch]);
    dw.data
        .par_chunks_mut(row_len)
        .zip(db.data.par_iter_mut())
        .enumerate()
        .for_each(|(co, (dw_row, db_val))| {
            for b in 0..batch {
                let dy_plane = &dy.data[(b * out_ch + co) * hw..(b * out_ch + co + 1) * hw];
                let patch_block = &patches.data[b * hw * row_len..(b + 1) * hw * row_len];
                for (p, &g) in dy_plane.iter().enumerate() {
                    if g != 0.0 {
                        axpy(g, &patch_block[p * row_len..(p + 1) * row_len], dw_row);
                    }
                    *db_val += g;
                }
            }
        });

    // dx: dpatches = dy · W, then col2im scatter-add, one image at a time.
    let mut dx = Tensor::zeros(&[batch, in_ch, h, w]);
    dx.data
        .par_chunks_mut(in_ch * h * w)
        .zip(dy.data.par_chunks(out_ch * hw))
        .for_each(|(dx_image, dy_image)| {
            let mut dpatch = vec![0.0; row_len];
            for p in 0..hw {
                dpatch.fill(0.0);
                for co in 0..out_ch {
                    let g = dy_image[co * hw + p];
                    if g != 0.0 {
                        axpy(g, weight.row(co), &mut dpatch);
                    }
                }
                let (oy, ox) = (p / ow, p % ow);
                let mut idx = 0;
                for c in 0..in_ch {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad_y as isize;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad_x as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                dx_image[c * h * w + iy as usize * w + ix as usize] += dpatch[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        });

    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Uses the forward *output* as the gate: gradient passes where output > 0.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &out) in dx.data.iter_mut().zip(&y.data) {
        if out <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

/// Iteration geometry for per-feature reduction: dense tensors normalize per
/// column over the batch, conv tensors per channel over batch and space.
fn bn_geometry(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (shape[1], shape[0], 1), // (features, batch, spatial)
        4 => (shape[1], shape[0], shape[2] * shape[3]),
        _ => unreachable!("batchnorm input must be rank 2 or 4"),
    }
}

#[inline]
fn bn_feature_slice(data: &[f64], features: usize, spatial: usize, b: usize, f: usize) -> &[f64] {
    let start = (b * features + f) * spatial;
    &data[start..start + spatial]
}

#[allow(clippy::too_many_arguments)]
pub fn bn_forward_train(
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
    momentum: f64,
    epsilon: f64,
    x: &Tensor,
) -> (Tensor, LayerCache) {
    let (features, batch, spatial) = bn_geometry(&x.shape);
    let n = (batch * spatial) as f64;

    let mut out = Tensor::zeros(&x.shape);
    let mut xhat = vec![0.0; x.data.len()];
    let mut inv_std = vec![0.0; features];

    // Each feature is reduced serially; features run in parallel.
    let batch_means: Vec<(f64, f64)> = (0..features)
        .into_par_iter()
        .map(|f| {
            let mut sum = 0.0;
            for b in 0..batch {
                for &v in bn_feature_slice(&x.data, features, spatial, b, f) {
                    sum += v;
                }
            }
            let mean = sum / n;
            let mut ss = 0.0;
            for b in 0..batch {
                for &v in bn_feature_slice(&x.data, features, spatial, b, f) {
                    ss += (v - mean) * (v - mean);
                }
            }
            (mean, ss / n)
        })
        .collect();

    for (f, &(mean, var)) in batch_means.iter().enumerate() {
        inv_std[f] = 1.0 / (var + epsilon).sqrt();
        running_mean.data[f] = (1.0 - momentum) * running_mean.data[f] + momentum * mean;
        running_var.data[f] = (1.0 - momentum) * running_var.data[f] + momentum * var;
    }

    out.data
        .par_chunks_mut(spatial)
        .zip(xhat.par_chunks_mut(spatial))
        .enumerate()
        .for_each(|(chunk, (out_s, xhat_s))| {
            let f = chunk % features;
            let (mean, _) = batch_means[f];
            let is = inv_std[f];
            let (g, bt) = (gamma.data[f], beta.data[f]);
            let start = chunk * spatial;
            for i in 0..spatial {
                let xh = (x.data[start + i] - mean) * is;
                xhat_s[i] = xh;
                out_s[i] = g * xh + bt;
            }
        });

    (out, LayerCache::BatchNorm { xhat, inv_std })
}

pub fn bn_forward_eval(
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    epsilon: f64,
    x: &Tensor,
) -> Tensor {
    let (features, _batch, spatial) = bn_geometry(&x.shape);
    let mut out = Tensor::zeros(&x.shape);
    out.data
        .par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(chunk, out_s)| {
            let f = chunk % features;
            let is = 1.0 / (running_var.data[f] + epsilon).sqrt();
            let (m, g, bt) = (running_mean.data[f], gamma.data[f], beta.data[f]);
            let start = chunk * spatial;
            for i in 0..spatial {
                out_s[i] = g * (x.data[start + i] - m) * is + bt;
            }
        });
    out
}

/// Returns `(dx, d_gamma, d_beta)`; full backprop through the batch
/// statistics.
pub fn bn_backward(
    gamma: &Tensor,
    cache: &LayerCache,
    x_shape: &[usize],
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let LayerCache::BatchNorm { xhat, inv_std } = cache else {
        unreachable!("batchnorm backward requires a batchnorm cache");
    };
    let (features, batch, spatial) = bn_geometry(x_shape);
    let n = (batch * spatial) as f64;

    let mut d_gamma = Tensor::zeros(&[features]);
    let mut d_beta = Tensor::zeros(&[features]);
    let sums: Vec<(f64, f64)> = (0..features)
        .into_par_iter()
        .map(|f| {
            let mut s_dy = 0.0;
            let mut s_dy_xhat = 0.0;
            for b in 0..batch {
                let start = (b * features + f) * spatial;
                for i in 0..spatial {
                    let g = dy.data[start + i];
                    s_dy += g;
                    s_dy_xhat += g * xhat[start + i];
                }
            }
            (s_dy, s_dy_xhat)
        })
        .collect();
    for (f, &(s_dy, s_dy_xhat)) in sums.iter().enumerate() {
        d_beta.data[f] = s_dy;
        d_gamma.data[f] = s_dy_xhat;
    }

    let mut dx = Tensor::zeros(x_shape);
    dx.data
        .par_chunks_mut(spatial)
        .enumerate()
        .for_each(|(chunk, dx_s)| {
            let f = chunk % features;
            let (s_dy, s_dy_xhat) = sums[f];
            let scale = gamma.data[f] * inv_std[f];
            let start = chunk * spatial;
            for i in 0..spatial {
                dx_s[i] = scale
                    * (dy.data[start + i] - s_dy / n - xhat[start + i] * s_dy_xhat / n);
            }
        });

    (dx, d_gamma, d_beta)
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: kept units are scaled by `1/(1-p)` so eval mode is an
/// exact identity. The mask is drawn serially from `rng`.
pub fn dropout_forward_train(p: f64, x: &Tensor, rng: &mut ChaCha8Rng) -> (Tensor, LayerCache) {
    let keep_scale = 1.0 / (1.0 - p);
    let mut out = x.clone();
    let mut mask = vec![0.0; x.data.len()];
    for (m, v) in mask.iter_mut().zip(&mut out.data) {
        if rng.gen::<f64>() >= p {
            *m = keep_scale;
            *v *= keep_scale;
        } else {
            *m = 0.0;
            *v = 0.0;
        }
    }
    (out, LayerCache::Dropout { mask })
}

pub fn dropout_backward(cache: &LayerCache, dy: &Tensor) -> Tensor {
    let LayerCache::Dropout { mask } = cache else {
        unreachable!("dropout backward requires a dropout cache");
    };
    let mut dx = dy.clone();
    for (g, &m) in dx.data.iter_mut().zip(mask) {
        *g *= m;
    }
    dx
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

/// Mean cross-entropy (nats) and `d loss / d logits` (already divided by the
/// batch size).
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let batch = logits.batch();
    let classes = logits.row_len();
    if labels.len() != batch {
        return Err(Error::State(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut dlogits = Tensor::zeros(&[batch, classes]);
    let mut loss_sum = 0.0;
    for b in 0..batch {
        let row = logits.row(b);
        let y = labels[b];
        if y >= classes {
            return Err(Error::State(format!("label {y} out of range (C={classes})")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        loss_sum += z.ln() + max - row[y];
        let d_row = dlogits.row_mut(b);
        for (k, dv) in d_row.iter_mut().enumerate() {
            let p = (row[k] - max).exp() / z;
            *dv = (p - if k == y { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    Ok((loss_sum / batch as f64, dlogits))
}

/// Prediction with deterministic tie-breaking: the lowest class index among
/// maxima wins.
pub fn argmax_class(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// `(correct_count, summed_loss)` over a batch of logits.
pub fn batch_metrics(logits: &Tensor, labels: &[usize]) -> (usize, f64) {
    let mut correct = 0;
    let mut loss_sum = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = logits.row(b);
        if argmax_class(row) == y {
            correct += 1;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        loss_sum += z.ln() + max - row[y];
    }
    (correct, loss_sum)
}
