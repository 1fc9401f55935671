//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Forward calls append nodes to a [`Tape`] in execution order, so the node
//! list is topologically sorted by construction. [`Tape::backward`] walks it
//! in reverse and returns a [`Gradients`] table. Callers that own long-lived
//! parameter tensors move those gradients into them with
//! [`Tensor::accumulate_grad`]; repeated backward passes therefore
//! accumulate until `zero_grad` is called.

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::{channel_layout, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    Depthwise { input: Var, kernel: Var, geom: ConvGeom },
    ChannelScale { input: Var, gains: Var },
    ChannelBias { input: Var, bias: Var },
    Dense { input: Var, weight: Var, bias: Option<Var>, batch: usize, m: usize, n_out: usize },
    Relu { input: Var },
    AvgPool { input: Var, geom: ConvGeom },
    GlobalAvgPool { input: Var, planes: usize, area: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    SoftmaxCe { logits: Var, probs: Vec<f64>, labels: Vec<usize>, k: usize },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
    Sum { input: Var },
    Mse { input: Var, target: Vec<f64> },
    SmoothL0 { input: Var, eps: Vec<f64> },
    ChannelNorm { kernels: Vec<Var>, norms: Vec<f64> },
    Bilinear { inputs: Vec<Var>, pairs: Vec<(usize, usize, f64)>, linear: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar loss with respect to every recorded node that
/// requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// How a batch norm node normalizes.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalize by batch statistics.
    Train,
    /// Normalize by fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn check(&self, var: Var) -> Result<&Node> {
        self.nodes.get(var.0).ok_or(Error::ForeignVar(var.0))
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// reports a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.requires_grad = false;
        self.leaf(value)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, k) = (&self.check(input)?.value, &self.check(kernel)?.value);
        let (batched, geom) = ops::conv_geom(x.shape(), k.shape(), stride, padding)?;
        let out = Tensor::new(geom.out_shape(batched), ops::conv2d_forward(&geom, x.data(), k.data()))?;
        Ok(self.push(out, Op::Conv2d { input, kernel, geom }, &[input, kernel]))
    }

    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, k) = (&self.check(input)?.value, &self.check(kernel)?.value);
        let (batched, geom) = ops::depthwise_geom(x.shape(), k.shape(), stride, padding)?;
        let out = Tensor::new(geom.out_shape(batched), ops::depthwise_forward(&geom, x.data(), k.data()))?;
        Ok(self.push(out, Op::Depthwise { input, kernel, geom }, &[input, kernel]))
    }

    pub fn channel_scale(&mut self, input: Var, gains: Var) -> Result<Var> {
        let (x, g) = (&self.check(input)?.value, &self.check(gains)?.value);
        let layout = x.channel_layout()?;
        if g.numel() != layout.1 {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let out = Tensor::new(x.shape().to_vec(), ops::channel_scale_forward(layout, x.data(), g.data()))?;
        Ok(self.push(out, Op::ChannelScale { input, gains }, &[input, gains]))
    }

    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (&self.check(input)?.value, &self.check(bias)?.value);
        let layout = x.channel_layout()?;
        if b.numel() != layout.1 {
            return Err(Error::ShapeMismatch {
                op: "channel_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out = Tensor::new(x.shape().to_vec(), ops::channel_bias_forward(layout, x.data(), b.data()))?;
        Ok(self.push(out, Op::ChannelBias { input, bias }, &[input, bias]))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = &self.check(input)?.value;
        let w = &self.check(weight)?.value;
        let (batched, batch, m) = ops::dense_dims(x.shape())?;
        let [n_out, wm] = *w.shape() else {
            return Err(Error::invalid("dense", format!("weight must be [n,m], got {:?}", w.shape())));
        };
        let b = match bias {
            Some(b) => Some(self.check(b)?.value.data()),
            None => None,
        };
        if wm != m || b.is_some_and(|b| b.len() != n_out) {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let out = ops::dense_forward(batch, m, n_out, x.data(), w.data(), b);
        let shape = if batched { vec![batch, n_out] } else { vec![n_out] };
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Dense { input, weight, bias, batch, m, n_out },
            &parents,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = &self.check(input)?.value;
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| ops::relu(v)).collect())?;
        Ok(self.push(out, Op::Relu { input }, &[input]))
    }

    /// Unpadded average pooling over `kernel x kernel` windows.
    pub fn avgpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        let x = &self.check(input)?.value;
        let (batched, n, c, h, w) = match *x.shape() {
            [c, h, w] => (false, 1, c, h, w),
            [n, c, h, w] => (true, n, c, h, w),
            _ => return Err(Error::invalid("avgpool2d", format!("bad input shape {:?}", x.shape()))),
        };
        let (Some(ho), Some(wo)) = (ops::out_extent(h, kernel, stride, 0), ops::out_extent(w, kernel, stride, 0)) else {
            return Err(Error::invalid("avgpool2d", format!("window {kernel}/{stride} does not fit {:?}", x.shape())));
        };
        let geom = ConvGeom { n, c, h, w, d: c, kh: kernel, kw: kernel, stride, pad: 0, ho, wo };
        let out = Tensor::new(geom.out_shape(batched), ops::avgpool_forward(&geom, x.data()))?;
        Ok(self.push(out, Op::AvgPool { input, geom }, &[input]))
    }

    /// `[n, c, h, w] -> [n, c]` (or `[c, h, w] -> [c]`).
    pub fn global_avgpool(&mut self, input: Var) -> Result<Var> {
        let x = &self.check(input)?.value;
        let (shape, area) = match *x.shape() {
            [c, h, w] => (vec![c], h * w),
            [n, c, h, w] => (vec![n, c], h * w),
            _ => return Err(Error::invalid("global_avgpool", format!("bad input shape {:?}", x.shape()))),
        };
        let planes = x.numel() / area;
        let out: Vec<f64> = x.data().chunks(area).map(|p| p.iter().sum::<f64>() / area as f64).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::GlobalAvgPool { input, planes, area }, &[input]))
    }

    /// Per-channel normalization with learnable scale and shift.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = &self.check(input)?.value;
        let layout = x.channel_layout()?;
        let (g, b) = (&self.check(gamma)?.value, &self.check(beta)?.value);
        if g.numel() != layout.1 || b.numel() != layout.1 {
            return Err(Error::ShapeMismatch {
                op: "batchnorm2d",
                lhs: x.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let (stats, training) = match mode {
            NormMode::Train => {
                let (mean, var) = ops::channel_moments(layout, x.data());
                (BatchStats { mean, var }, true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != layout.1 || var.len() != layout.1 {
                    return Err(Error::ShapeMismatch {
                        op: "batchnorm2d",
                        lhs: x.shape().to_vec(),
                        rhs: vec![mean.len(), var.len()],
                    });
                }
                (BatchStats { mean: mean.to_vec(), var: var.to_vec() }, false)
            }
        };
        let (y, xhat, inv_std) = ops::batchnorm_forward(layout, x.data(), &stats.mean, &stats.var, g.data(), b.data(), eps);
        let out = Tensor::new(x.shape().to_vec(), y)?;
        let var = self.push(out, Op::BatchNorm { input, gamma, beta, xhat, inv_std, training }, &[input, gamma, beta]);
        Ok((var, training.then_some(stats)))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = &self.check(logits)?.value;
        let (batch, k) = match *x.shape() {
            [k] => (1, k),
            [n, k] => (n, k),
            _ => return Err(Error::invalid("softmax_cross_entropy", format!("bad logits shape {:?}", x.shape()))),
        };
        let (loss, probs) = ops::softmax_ce_forward(batch, k, x.data(), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe { logits, probs, labels: labels.to_vec(), k },
            &[logits],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.check(a)?.value, &self.check(b)?.value);
        if x.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: x.shape().to_vec(),
                rhs: y.shape().to_vec(),
            });
        }
        let out: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        Ok(self.push(Tensor::new(x.shape().to_vec(), out)?, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let x = &self.check(input)?.value;
        let out = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())?;
        Ok(self.push(out, Op::Scale { input, factor }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.check(input)?.value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { input }, &[input]))
    }

    /// Mean squared difference to a constant target.
    pub fn mse(&mut self, input: Var, target: &[f64]) -> Result<Var> {
        let x = &self.check(input)?.value;
        if x.numel() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: x.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let loss = x.data().iter().zip(target).map(|(a, t)| (a - t) * (a - t)).sum::<f64>() / target.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { input, target: target.to_vec() }, &[input]))
    }

    /// Elementwise `x^2 / (x^2 + eps)`. `eps` is one shared value or one per entry.
    pub fn smooth_l0(&mut self, input: Var, eps: &[f64]) -> Result<Var> {
        let x = &self.check(input)?.value;
        if eps.len() != 1 && eps.len() != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "smooth_l0",
                lhs: x.shape().to_vec(),
                rhs: vec![eps.len()],
            });
        }
        if let Some(&bad) = eps.iter().find(|&&e| !(e > 0.0)) {
            return Err(Error::NonPositiveEpsilon(bad));
        }
        let eps = if eps.len() == 1 { vec![eps[0]; x.numel()] } else { eps.to_vec() };
        let out: Vec<f64> = x.data().iter().zip(&eps).map(|(&v, &e)| ops::smooth_l0(v, e)).collect();
        Ok(self.push(Tensor::new(x.shape().to_vec(), out)?, Op::SmoothL0 { input, eps }, &[input]))
    }

    /// Joint l2 norm of each input-channel slice across `kernels`.
    pub fn channel_norm(&mut self, kernels: &[Var]) -> Result<Var> {
        let mut views = Vec::with_capacity(kernels.len());
        for &k in kernels {
            let t = &self.check(k)?.value;
            views.push((t.shape(), t.data()));
        }
        let norms = ops::input_channel_norms(&views)?;
        let out = Tensor::from_vec(norms.clone());
        Ok(self.push(out, Op::ChannelNorm { kernels: kernels.to_vec(), norms }, kernels))
    }

    /// `sum_{(l,k,a)} a * s_l * s_k + sum_l linear[l] * s_l` over scalar inputs `s`.
    pub fn bilinear(&mut self, inputs: &[Var], pairs: &[(usize, usize, f64)], linear: &[f64]) -> Result<Var> {
        if linear.len() != inputs.len() || pairs.iter().any(|&(l, k, _)| l >= inputs.len() || k >= inputs.len()) {
            return Err(Error::invalid("bilinear", "coefficients do not match the input count"));
        }
        let mut s = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let t = &self.check(v)?.value;
            if t.numel() != 1 {
                return Err(Error::invalid("bilinear", format!("inputs must be scalars, got {:?}", t.shape())));
            }
            s.push(t.data()[0]);
        }
        let value = pairs.iter().map(|&(l, k, a)| a * s[l] * s[k]).sum::<f64>()
            + linear.iter().zip(&s).map(|(b, v)| b * v).sum::<f64>();
        Ok(self.push(
            Tensor::scalar(value),
            Op::Bilinear { inputs: inputs.to_vec(), pairs: pairs.to_vec(), linear: linear.to_vec() },
            inputs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: &[f64]| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (gi, gk) = ops::conv2d_backward(geom, val(*input), val(*kernel), g, self.wants(*input), self.wants(*kernel));
                if let Some(gi) = gi {
                    acc(*input, &gi);
                }
                if let Some(gk) = gk {
                    acc(*kernel, &gk);
                }
            }
            Op::Depthwise { input, kernel, geom } => {
                let (gi, gk) = ops::depthwise_backward(geom, val(*input), val(*kernel), g, self.wants(*input), self.wants(*kernel));
                if let Some(gi) = gi {
                    acc(*input, &gi);
                }
                if let Some(gk) = gk {
                    acc(*kernel, &gk);
                }
            }
            Op::ChannelScale { input, gains } => {
                let layout = channel_layout(node.value.shape()).expect("recorded layout");
                let (gi, gg) = ops::channel_scale_backward(layout, val(*input), val(*gains), g);
                acc(*input, &gi);
                acc(*gains, &gg);
            }
            Op::ChannelBias { input, bias } => {
                let layout = channel_layout(node.value.shape()).expect("recorded layout");
                acc(*input, g);
                acc(*bias, &ops::channel_sums(layout, g));
            }
            Op::Dense { input, weight, bias, batch, m, n_out } => {
                let (gi, gw, gb) = ops::dense_backward(*batch, *m, *n_out, val(*input), val(*weight), g);
                acc(*input, &gi);
                acc(*weight, &gw);
                if let Some(b) = bias {
                    acc(*b, &gb);
                }
            }
            Op::Relu { input } => {
                let gi: Vec<f64> = val(*input).iter().zip(g).map(|(&x, &go)| if x > 0.0 { go } else { 0.0 }).collect();
                acc(*input, &gi);
            }
            Op::AvgPool { input, geom } => acc(*input, &ops::avgpool_backward(geom, g)),
            Op::GlobalAvgPool { input, planes, area } => {
                let mut gi = vec![0.0; planes * area];
                for (p, &go) in g.iter().enumerate() {
                    gi[p * area..][..*area].iter_mut().for_each(|v| *v = go / *area as f64);
                }
                acc(*input, &gi);
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, training } => {
                let layout = channel_layout(node.value.shape()).expect("recorded layout");
                let (gx, gg, gb) = ops::batchnorm_backward(layout, xhat, inv_std, val(*gamma), g, *training);
                acc(*input, &gx);
                acc(*gamma, &gg);
                acc(*beta, &gb);
            }
            Op::SoftmaxCe { logits, probs, labels, k } => {
                let batch = labels.len();
                let scale = g[0] / batch as f64;
                let mut gl = probs.clone();
                for (b, &label) in labels.iter().enumerate() {
                    gl[b * k + label] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, &gl);
            }
            Op::Add { a, b } => {
                acc(*a, g);
                acc(*b, g);
            }
            Op::Scale { input, factor } => {
                let gi: Vec<f64> = g.iter().map(|v| v * factor).collect();
                acc(*input, &gi);
            }
            Op::Sum { input } => {
                let gi = vec![g[0]; val(*input).len()];
                acc(*input, &gi);
            }
            Op::Mse { input, target } => {
                let scale = 2.0 * g[0] / target.len() as f64;
                let gi: Vec<f64> = val(*input).iter().zip(target).map(|(a, t)| scale * (a - t)).collect();
                acc(*input, &gi);
            }
            Op::SmoothL0 { input, eps } => {
                let gi: Vec<f64> = val(*input)
                    .iter()
                    .zip(eps)
                    .zip(g)
                    .map(|((&x, &e), &go)| go * ops::smooth_l0_grad(x, e))
                    .collect();
                acc(*input, &gi);
            }
            Op::ChannelNorm { kernels, norms } => {
                for &k in kernels {
                    let t = &self.nodes[k.0].value;
                    let (d, c, inner) = match *t.shape() {
                        [d, c, kh, kw] => (d, c, kh * kw),
                        [d, c] => (d, c, 1),
                        _ => unreachable!("validated in forward"),
                    };
                    let w = t.data();
                    let mut gk = vec![0.0; w.len()];
                    for o in 0..d {
                        for ch in 0..c {
                            // The norm is not differentiable at 0; use the zero subgradient.
                            if norms[ch] == 0.0 {
                                continue;
                            }
                            let s = g[ch] / norms[ch];
                            let off = (o * c + ch) * inner;
                            for i in off..off + inner {
                                gk[i] = s * w[i];
                            }
                        }
                    }
                    acc(k, &gk);
                }
            }
            Op::Bilinear { inputs, pairs, linear } => {
                let s: Vec<f64> = inputs.iter().map(|v| val(*v)[0]).collect();
                let mut ds = linear.clone();
                for &(l, k, a) in pairs {
                    ds[l] += a * s[k];
                    ds[k] += a * s[l];
                }
                for (v, d) in inputs.iter().zip(ds) {
                    acc(*v, &[g[0] * d]);
                }
            }
        }
    }
}
