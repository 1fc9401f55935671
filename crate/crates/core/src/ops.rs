//! Forward and backward kernels for the layer set.
//!
//! Every kernel works on flat row-major buffers. The free functions at the
//! bottom wrap them for one-shot evaluation on [`Tensor`]s; the tape in
//! [`crate::autodiff`] records the same kernels for reverse mode.

use crate::error::{Error, Result};
use crate::tensor::{channel_layout, Tensor};

/// Resolved geometry of a (depthwise) convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size + 2 * pad < k {
        return None;
    }
    Some((size + 2 * pad - k) / stride + 1)
}

/// Output positions `o` with `0 <= o*stride + off - pad < size`.
#[inline]
fn valid_range(out: usize, size: usize, off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let limit = size + pad;
    let hi = if limit > off {
        ((limit - off - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Splits an input shape into (batched?, n, c, h, w).
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(bool, usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((false, 1, c, h, w)),
        [n, c, h, w] => Ok((true, n, c, h, w)),
        _ => Err(Error::invalid(op, format!("expected [c,h,w] or [n,c,h,w], got {shape:?}"))),
    }
}

pub(crate) fn conv_geom(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(bool, ConvGeom)> {
    let (batched, n, c, h, w) = image_dims("conv2d", input)?;
    let [d, kc, kh, kw] = *kernel else {
        return Err(Error::invalid("conv2d", format!("kernel must be [d,c,r,r], got {kernel:?}")));
    };
    if kc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    let (Some(ho), Some(wo)) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad)) else {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    };
    Ok((batched, ConvGeom { n, c, h, w, d, kh, kw, stride, pad, ho, wo }))
}

pub(crate) fn depthwise_geom(
    input: &[usize],
    kernel: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(bool, ConvGeom)> {
    let (batched, n, c, h, w) = image_dims("depthwise_conv2d", input)?;
    let [kc, kh, kw] = *kernel else {
        return Err(Error::invalid(
            "depthwise_conv2d",
            format!("kernel must be [c,r,r], got {kernel:?}"),
        ));
    };
    if kc != c {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::invalid("depthwise_conv2d", "stride must be at least 1"));
    }
    let (Some(ho), Some(wo)) = (out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad)) else {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        });
    };
    Ok((batched, ConvGeom { n, c, h, w, d: c, kh, kw, stride, pad, ho, wo }))
}

impl ConvGeom {
    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.n, self.d, self.ho, self.wo]
        } else {
            vec![self.d, self.ho, self.wo]
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.d * g.ho * g.wo];
    for n in 0..g.n {
        for o in 0..g.d {
            let out_plane = &mut out[(n * g.d + o) * g.ho * g.wo..][..g.ho * g.wo];
            for c in 0..g.c {
                let in_plane = &input[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for i in 0..g.kh {
                    let (ylo, yhi) = valid_range(g.ho, g.h, i, g.stride, g.pad);
                    for j in 0..g.kw {
                        let k = kernel[((o * g.c + c) * g.kh + i) * g.kw + j];
                        let (xlo, xhi) = valid_range(g.wo, g.w, j, g.stride, g.pad);
                        for y in ylo..yhi {
                            let iy = y * g.stride + i - g.pad;
                            let row = &in_plane[iy * g.w..][..g.w];
                            let orow = &mut out_plane[y * g.wo..][..g.wo];
                            for x in xlo..xhi {
                                orow[x] += k * row[x * g.stride + j - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_input, grad_kernel).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gi = need_input.then(|| vec![0.0; input.len()]);
    let mut gk = need_kernel.then(|| vec![0.0; kernel.len()]);
    for n in 0..g.n {
        for o in 0..g.d {
            let go_plane = &grad_out[(n * g.d + o) * g.ho * g.wo..][..g.ho * g.wo];
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for i in 0..g.kh {
                    let (ylo, yhi) = valid_range(g.ho, g.h, i, g.stride, g.pad);
                    for j in 0..g.kw {
                        let kidx = ((o * g.c + c) * g.kh + i) * g.kw + j;
                        let k = kernel[kidx];
                        let (xlo, xhi) = valid_range(g.wo, g.w, j, g.stride, g.pad);
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let iy = y * g.stride + i - g.pad;
                            let grow = &go_plane[y * g.wo..][..g.wo];
                            let rbase = base + iy * g.w;
                            if let Some(gi) = gi.as_mut() {
                                for x in xlo..xhi {
                                    gi[rbase + x * g.stride + j - g.pad] += k * grow[x];
                                }
                            }
                            if gk.is_some() {
                                for x in xlo..xhi {
                                    acc += input[rbase + x * g.stride + j - g.pad] * grow[x];
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gi, gk)
}

pub(crate) fn depthwise_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c * g.ho * g.wo];
    for n in 0..g.n {
        for c in 0..g.c {
            let in_plane = &input[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            let out_plane = &mut out[(n * g.c + c) * g.ho * g.wo..][..g.ho * g.wo];
            for i in 0..g.kh {
                let (ylo, yhi) = valid_range(g.ho, g.h, i, g.stride, g.pad);
                for j in 0..g.kw {
                    let k = kernel[(c * g.kh + i) * g.kw + j];
                    let (xlo, xhi) = valid_range(g.wo, g.w, j, g.stride, g.pad);
                    for y in ylo..yhi {
                        let iy = y * g.stride + i - g.pad;
                        for x in xlo..xhi {
                            out_plane[y * g.wo + x] += k * in_plane[iy * g.w + x * g.stride + j - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gi = need_input.then(|| vec![0.0; input.len()]);
    let mut gk = need_kernel.then(|| vec![0.0; kernel.len()]);
    for n in 0..g.n {
        for c in 0..g.c {
            let base = (n * g.c + c) * g.h * g.w;
            let go_plane = &grad_out[(n * g.c + c) * g.ho * g.wo..][..g.ho * g.wo];
            for i in 0..g.kh {
                let (ylo, yhi) = valid_range(g.ho, g.h, i, g.stride, g.pad);
                for j in 0..g.kw {
                    let kidx = (c * g.kh + i) * g.kw + j;
                    let k = kernel[kidx];
                    let (xlo, xhi) = valid_range(g.wo, g.w, j, g.stride, g.pad);
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let iy = y * g.stride + i - g.pad;
                        for x in xlo..xhi {
                            let idx = base + iy * g.w + x * g.stride + j - g.pad;
                            let go = go_plane[y * g.wo + x];
                            if let Some(gi) = gi.as_mut() {
                                gi[idx] += k * go;
                            }
                            acc += input[idx] * go;
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    (gi, gk)
}

/// `out[.., c, ..] = gains[c] * input[.., c, ..]`
pub(crate) fn channel_scale_forward(layout: (usize, usize, usize), input: &[f64], gains: &[f64]) -> Vec<f64> {
    let (outer, c, inner) = layout;
    let mut out = input.to_vec();
    for o in 0..outer {
        for (ch, &g) in gains.iter().enumerate().take(c) {
            out[(o * c + ch) * inner..][..inner].iter_mut().for_each(|v| *v *= g);
        }
    }
    out
}

/// Returns (grad_input, grad_gains).
pub(crate) fn channel_scale_backward(
    layout: (usize, usize, usize),
    input: &[f64],
    gains: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (outer, c, inner) = layout;
    let mut gi = grad_out.to_vec();
    let mut gg = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let off = (o * c + ch) * inner;
            let mut acc = 0.0;
            for k in off..off + inner {
                acc += grad_out[k] * input[k];
                gi[k] *= gains[ch];
            }
            gg[ch] += acc;
        }
    }
    (gi, gg)
}

pub(crate) fn channel_bias_forward(layout: (usize, usize, usize), input: &[f64], bias: &[f64]) -> Vec<f64> {
    let (outer, c, inner) = layout;
    let mut out = input.to_vec();
    for o in 0..outer {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            out[(o * c + ch) * inner..][..inner].iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

pub(crate) fn channel_sums(layout: (usize, usize, usize), values: &[f64]) -> Vec<f64> {
    let (outer, c, inner) = layout;
    let mut sums = vec![0.0; c];
    for o in 0..outer {
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += values[(o * c + ch) * inner..][..inner].iter().sum::<f64>();
        }
    }
    sums
}

/// `out[b, o] = sum_m weight[o, m] * input[b, m] + bias[o]`
pub(crate) fn dense_forward(batch: usize, m: usize, n_out: usize, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; batch * n_out];
    for b in 0..batch {
        let x = &input[b * m..][..m];
        for o in 0..n_out {
            let w = &weight[o * m..][..m];
            let mut acc = bias.map_or(0.0, |bias| bias[o]);
            for k in 0..m {
                acc += w[k] * x[k];
            }
            out[b * n_out + o] = acc;
        }
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias).
pub(crate) fn dense_backward(
    batch: usize,
    m: usize,
    n_out: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gi = vec![0.0; batch * m];
    let mut gw = vec![0.0; n_out * m];
    let mut gb = vec![0.0; n_out];
    for b in 0..batch {
        let x = &input[b * m..][..m];
        for o in 0..n_out {
            let go = grad_out[b * n_out + o];
            gb[o] += go;
            let w = &weight[o * m..][..m];
            let gwr = &mut gw[o * m..][..m];
            let gir = &mut gi[b * m..][..m];
            for k in 0..m {
                gwr[k] += go * x[k];
                gir[k] += go * w[k];
            }
        }
    }
    (gi, gw, gb)
}

pub(crate) fn avgpool_forward(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.c * g.ho * g.wo];
    let norm = 1.0 / (g.kh * g.kw) as f64;
    for p in 0..g.n * g.c {
        let plane = &input[p * g.h * g.w..][..g.h * g.w];
        for y in 0..g.ho {
            for x in 0..g.wo {
                let mut acc = 0.0;
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        acc += plane[(y * g.stride + i) * g.w + x * g.stride + j];
                    }
                }
                out[(p * g.ho + y) * g.wo + x] = acc * norm;
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward(g: &ConvGeom, grad_out: &[f64]) -> Vec<f64> {
    let mut gi = vec![0.0; g.n * g.c * g.h * g.w];
    let norm = 1.0 / (g.kh * g.kw) as f64;
    for p in 0..g.n * g.c {
        for y in 0..g.ho {
            for x in 0..g.wo {
                let go = grad_out[(p * g.ho + y) * g.wo + x] * norm;
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        gi[p * g.h * g.w + (y * g.stride + i) * g.w + x * g.stride + j] += go;
                    }
                }
            }
        }
    }
    gi
}

/// Per-channel mean and biased variance over all non-channel axes.
pub(crate) fn channel_moments(layout: (usize, usize, usize), x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (outer, c, inner) = layout;
    let count = (outer * inner) as f64;
    let mean: Vec<f64> = channel_sums(layout, x).into_iter().map(|s| s / count).collect();
    let mut var = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += x[(o * c + ch) * inner..][..inner]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Normalizes with the given statistics. Returns (y, xhat, inv_std).
pub(crate) fn batchnorm_forward(
    layout: (usize, usize, usize),
    x: &[f64],
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (outer, c, inner) = layout;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for ch in 0..c {
            let off = (o * c + ch) * inner;
            for k in off..off + inner {
                xhat[k] = (x[k] - mean[ch]) * inv_std[ch];
                y[k] = gamma[ch] * xhat[k] + beta[ch];
            }
        }
    }
    (y, xhat, inv_std)
}

/// Returns (grad_x, grad_gamma, grad_beta).
pub(crate) fn batchnorm_backward(
    layout: (usize, usize, usize),
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    grad_out: &[f64],
    training: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (outer, c, inner) = layout;
    let count = (outer * inner) as f64;
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for o in 0..outer {
        for ch in 0..c {
            let off = (o * c + ch) * inner;
            for k in off..off + inner {
                ggamma[ch] += grad_out[k] * xhat[k];
                gbeta[ch] += grad_out[k];
            }
        }
    }
    let mut gx = vec![0.0; xhat.len()];
    for o in 0..outer {
        for ch in 0..c {
            let off = (o * c + ch) * inner;
            let scale = gamma[ch] * inv_std[ch];
            for k in off..off + inner {
                gx[k] = if training {
                    // dxhat summed over the channel equals gamma * gbeta, and
                    // dxhat . xhat equals gamma * ggamma.
                    scale * (grad_out[k] - (gbeta[ch] + xhat[k] * ggamma[ch]) / count)
                } else {
                    scale * grad_out[k]
                };
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Row-wise softmax probabilities and mean negative log-likelihood.
pub(crate) fn softmax_ce_forward(batch: usize, k: usize, logits: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: vec![batch, k],
            rhs: vec![labels.len()],
        });
    }
    let mut probs = vec![0.0; batch * k];
    let mut loss = 0.0;
    for b in 0..batch {
        let label = labels[b];
        if label >= k {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let row = &logits[b * k..][..k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        for (p, v) in probs[b * k..][..k].iter_mut().zip(row) {
            *p = (v - log_sum).exp();
        }
        loss += log_sum - row[label];
    }
    Ok((loss / batch as f64, probs))
}

#[inline]
pub(crate) fn smooth_l0(x: f64, eps: f64) -> f64 {
    let x2 = x * x;
    x2 / (x2 + eps)
}

#[inline]
pub(crate) fn smooth_l0_grad(x: f64, eps: f64) -> f64 {
    let denom = x * x + eps;
    2.0 * x * eps / (denom * denom)
}

/// Joint l2 norm of input-channel slices across kernels sharing a channel axis.
///
/// Conv kernels are `[d, c, kh, kw]`, dense weights `[n_out, c]`.
pub(crate) fn input_channel_norms(kernels: &[(&[usize], &[f64])]) -> Result<Vec<f64>> {
    let mut sq: Option<Vec<f64>> = None;
    for (shape, data) in kernels {
        let (d, c, inner) = match **shape {
            [d, c, kh, kw] => (d, c, kh * kw),
            [d, c] => (d, c, 1),
            _ => {
                return Err(Error::invalid(
                    "input_channel_norms",
                    format!("kernel shape {shape:?} has no input-channel axis"),
                ))
            }
        };
        let acc = sq.get_or_insert_with(|| vec![0.0; c]);
        if acc.len() != c {
            return Err(Error::ShapeMismatch {
                op: "input_channel_norms",
                lhs: vec![acc.len()],
                rhs: shape.to_vec(),
            });
        }
        for o in 0..d {
            for (ch, a) in acc.iter_mut().enumerate() {
                *a += data[(o * c + ch) * inner..][..inner].iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    let sq = sq.ok_or_else(|| Error::invalid("input_channel_norms", "no kernels given"))?;
    Ok(sq.into_iter().map(f64::sqrt).collect())
}

// -- one-shot tensor API ---------------------------------------------------

pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batched, g) = conv_geom(input.shape(), kernel.shape(), stride, padding)?;
    Tensor::new(g.out_shape(batched), conv2d_forward(&g, input.data(), kernel.data()))
}

pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batched, g) = depthwise_geom(input.shape(), kernel.shape(), stride, padding)?;
    Tensor::new(g.out_shape(batched), depthwise_forward(&g, input.data(), kernel.data()))
}

pub fn channel_scale(input: &Tensor, gains: &[f64]) -> Result<Tensor> {
    let layout = input.channel_layout()?;
    if layout.1 != gains.len() {
        return Err(Error::ShapeMismatch {
            op: "channel_scale",
            lhs: input.shape().to_vec(),
            rhs: vec![gains.len()],
        });
    }
    Tensor::new(input.shape().to_vec(), channel_scale_forward(layout, input.data(), gains))
}

/// Affine map on a vector `[m]` or a batch `[n, m]`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    let (batched, batch, m) = dense_dims(input.shape())?;
    let [n_out, wm] = *weight.shape() else {
        return Err(Error::invalid("dense", format!("weight must be [n,m], got {:?}", weight.shape())));
    };
    if wm != m || bias.is_some_and(|b| b.len() != n_out) {
        return Err(Error::ShapeMismatch {
            op: "dense",
            lhs: input.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let out = dense_forward(batch, m, n_out, input.data(), weight.data(), bias);
    let shape = if batched { vec![batch, n_out] } else { vec![n_out] };
    Tensor::new(shape, out)
}

pub(crate) fn dense_dims(shape: &[usize]) -> Result<(bool, usize, usize)> {
    match *shape {
        [m] => Ok((false, 1, m)),
        [n, m] => Ok((true, n, m)),
        _ => Err(Error::invalid("dense", format!("input must be [m] or [n,m], got {shape:?}"))),
    }
}

/// `max(x, 0)`, passing NaN through so bad inputs surface in the loss.
pub fn relu(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        x
    }
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (batch, k) = match *logits.shape() {
        [k] => (1, k),
        [n, k] => (n, k),
        _ => return Err(Error::invalid("softmax_cross_entropy", "logits must be [k] or [n,k]")),
    };
    softmax_ce_forward(batch, k, logits.data(), labels).map(|(l, _)| l)
}

pub fn batchnorm_inference(
    input: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let layout = channel_layout(input.shape())?;
    let c = layout.1;
    if [mean.len(), var.len(), gamma.len(), beta.len()].iter().any(|&l| l != c) {
        return Err(Error::ShapeMismatch {
            op: "batchnorm2d",
            lhs: input.shape().to_vec(),
            rhs: vec![mean.len(), var.len(), gamma.len(), beta.len()],
        });
    }
    let (y, _, _) = batchnorm_forward(layout, input.data(), mean, var, gamma, beta, eps);
    Tensor::new(input.shape().to_vec(), y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for size in 1..7 {
            for k in 1..4 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        let Some(out) = out_extent(size, k, stride, pad) else { continue };
                        for off in 0..k {
                            let (lo, hi) = valid_range(out, size, off, stride, pad);
                            let expect: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let p = (o * stride + off) as isize - pad as isize;
                                    p >= 0 && (p as usize) < size
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, expect, "size={size} k={k} s={stride} p={pad} off={off}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::new(vec![1, 2, 3], vec![1.0, -2.0, 3.5, 0.25, 7.0, -1.0]).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_shape_errors_name_both_shapes() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &k, 1, 0).unwrap_err().to_string();
        assert!(err.contains("[2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), 0, 0).is_err());
    }

    #[test]
    fn depthwise_ones() {
        let x = Tensor::full(&[2, 3, 3], 1.0);
        let k = Tensor::full(&[2, 3, 3], 1.0);
        let y = depthwise_conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.data(), &[9.0, 9.0]);
    }

    #[test]
    fn single_channel_depthwise_is_conv() {
        let data: Vec<f64> = (0..25).map(|v| (v as f64 * 0.37).sin()).collect();
        let x = Tensor::new(vec![1, 5, 5], data).unwrap();
        let kd: Vec<f64> = (0..9).map(|v| v as f64 - 4.0).collect();
        let dk = Tensor::new(vec![1, 3, 3], kd.clone()).unwrap();
        let ck = Tensor::new(vec![1, 1, 3, 3], kd).unwrap();
        assert_eq!(depthwise_conv2d(&x, &dk, 2, 1).unwrap(), conv2d(&x, &ck, 2, 1).unwrap());
    }

    #[test]
    fn channel_scale_edges() {
        let x = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(channel_scale(&x, &[1.0, 1.0]).unwrap(), x);
        assert!(channel_scale(&x, &[0.0, 0.0]).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(channel_scale(&x, &[1.0]).is_err());
    }

    #[test]
    fn dense_hand_arithmetic() {
        let w = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let y = dense(&Tensor::from_vec(vec![4.0, 5.0]), &w, Some(&[3.0])).unwrap();
        assert_eq!(y.data(), &[17.0]);
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(vec![-1.5, 2.5]);
        assert_eq!(dense(&x, &eye, Some(&[0.0, 0.0])).unwrap(), x);
        assert!(dense(&Tensor::from_vec(vec![1.0; 3]), &w, None).is_err());
    }

    #[test]
    fn relu_and_uniform_softmax() {
        assert_eq!(relu(-1.0), 0.0);
        assert_eq!(relu(2.0), 2.0);
        assert!(relu(f64::NAN).is_nan());
        for k in [2usize, 3, 10] {
            let logits = Tensor::full(&[2, k], 0.7);
            let loss = softmax_cross_entropy(&logits, &[0, k - 1]).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-14);
        }
        let err = softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[3]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, classes: 3 }));
    }

    #[test]
    fn batchnorm_unit_stats_is_identity() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let y = batchnorm_inference(&x, &[0.0; 2], &[1.0; 2], &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(y, x);
    }
}
