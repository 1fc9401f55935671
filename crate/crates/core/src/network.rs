//! Gated forward pass over a [`NetworkGraph`].

use crate::autodiff::{BatchStats, NormMode, Tape, Var};
use crate::error::{Error, Result};
use crate::gate::GateMode;
use crate::graph::{LayerKind, NetworkGraph};
use crate::tensor::Tensor;

/// A trainable tensor owned by the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRef {
    Weight(usize),
    Bias(usize),
    /// Gate arguments of a group (introduced-parameter mode only).
    Alpha(usize),
}

/// Handles recorded by [`NetworkGraph::forward_tape`].
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    pub params: Vec<(ParamRef, Var)>,
    /// Batch statistics of every training-mode batch norm, by layer index.
    pub bn_stats: Vec<(usize, BatchStats)>,
    /// Per gate group, `g_eps` of the gate argument, when it is differentiable.
    pub smooth_gates: Vec<Option<Var>>,
}

impl NetworkGraph {
    /// Brings a raw input to `[n, ...]` form with the kept input channels.
    /// Returns the tensor and whether the caller passed a single sample.
    pub fn prepare_input(&self, input: &Tensor) -> Result<(Tensor, bool)> {
        let raw = &self.input.shape;
        let (batched, n) = if input.shape() == raw.as_slice() {
            (false, 1)
        } else if input.shape().len() == raw.len() + 1 && &input.shape()[1..] == raw.as_slice() {
            (true, input.shape()[0])
        } else {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: input.shape().to_vec(),
                rhs: raw.clone(),
            });
        };
        let mut shape = vec![n];
        shape.extend(self.input.effective_shape());
        let data = match &self.input.keep {
            None => input.data().to_vec(),
            Some(keep) => {
                let c = raw[0];
                let inner: usize = raw[1..].iter().product();
                let mut out = Vec::with_capacity(n * keep.len() * inner);
                for s in 0..n {
                    for &k in keep {
                        out.extend_from_slice(&input.data()[(s * c + k) * inner..][..inner]);
                    }
                }
                out
            }
        };
        if data.is_empty() {
            // Every input channel was pruned; only the batch size matters.
            return Ok((Tensor::zeros(&[n]), !batched));
        }
        Ok((Tensor::new(shape, data)?, !batched))
    }

    /// Records the gated forward pass on `tape`. `input` is a batch
    /// `[n, ...]` of raw samples.
    pub fn forward_tape(&self, tape: &mut Tape, input: &Tensor, training: bool) -> Result<Forward> {
        let (x, single) = self.prepare_input(input)?;
        if single {
            return Err(Error::invalid("forward_tape", "input must carry a batch axis"));
        }
        let n = x.shape()[0];
        let has_input = !self.input.effective_shape().contains(&0);

        let mut params = Vec::new();
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let w = match (&layer.kind, &layer.weight) {
                (_, Some(w)) => {
                    let v = tape.leaf(w.clone());
                    params.push((ParamRef::Weight(i), v));
                    Some(v)
                }
                _ => None,
            };
            let b = match (&layer.kind, &layer.bias) {
                (LayerKind::Constant { .. }, _) | (_, None) => None,
                (_, Some(b)) => {
                    let v = tape.leaf(b.clone());
                    params.push((ParamRef::Bias(i), v));
                    Some(v)
                }
            };
            weights.push(w);
            biases.push(b);
        }

        let mut smooth_gates = Vec::with_capacity(self.gates.len());
        let mut scales = Vec::with_capacity(self.gates.len());
        for (g, group) in self.gates.iter().enumerate() {
            let gv = &group.vector;
            let smooth = match gv.mode {
                GateMode::IntroducedParam if gv.forced.is_none() => {
                    let alpha = tape.leaf(Tensor::from_vec(gv.alpha.clone()).with_grad());
                    params.push((ParamRef::Alpha(g), alpha));
                    Some(tape.smooth_l0(alpha, gv.epsilon.as_slice())?)
                }
                GateMode::IntroducedParam => None,
                GateMode::WeightNorm | GateMode::RegularizerOnly => {
                    let kernels: Vec<Var> = group.sites.iter().map(|&s| weights[s].expect("sites carry weights")).collect();
                    let norm = tape.channel_norm(&kernels)?;
                    Some(tape.smooth_l0(norm, gv.epsilon.as_slice())?)
                }
            };
            let scale = match (gv.mode, gv.forced, smooth) {
                (GateMode::RegularizerOnly, ..) => None,
                (_, Some(v), _) => Some(tape.constant(Tensor::full(&[gv.len()], v))),
                (_, None, s) => s,
            };
            smooth_gates.push(smooth);
            scales.push(scale);
        }
        let site_groups = self.site_groups();

        let mut values: Vec<Option<Var>> = Vec::with_capacity(self.layers.len() + 1);
        values.push(has_input.then(|| tape.constant(x)));
        let mut bn_stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let arg = |k: usize| -> Result<Var> {
                values[layer.inputs[k]]
                    .ok_or_else(|| Error::Graph(format!("layer {:?} reads an empty node", layer.name)))
            };
            let gated = |tape: &mut Tape, x: Var| -> Result<Var> {
                match site_groups[i].and_then(|g| scales[g]) {
                    Some(s) => tape.channel_scale(x, s),
                    None => Ok(x),
                }
            };
            let out = match &layer.kind {
                LayerKind::Conv2d { stride, padding, .. } => {
                    let x = gated(tape, arg(0)?)?;
                    let y = tape.conv2d(x, weights[i].expect("conv weight"), *stride, *padding)?;
                    match biases[i] {
                        Some(b) => tape.channel_bias(y, b)?,
                        None => y,
                    }
                }
                LayerKind::DepthwiseConv2d { stride, padding, .. } => {
                    let y = tape.depthwise_conv2d(arg(0)?, weights[i].expect("depthwise weight"), *stride, *padding)?;
                    match biases[i] {
                        Some(b) => tape.channel_bias(y, b)?,
                        None => y,
                    }
                }
                LayerKind::Dense { .. } => {
                    let x = gated(tape, arg(0)?)?;
                    tape.dense(x, weights[i].expect("dense weight"), biases[i])?
                }
                LayerKind::Relu => tape.relu(arg(0)?)?,
                LayerKind::AvgPool2d { kernel, stride } => tape.avgpool2d(arg(0)?, *kernel, *stride)?,
                LayerKind::GlobalAvgPool => tape.global_avgpool(arg(0)?)?,
                LayerKind::BatchNorm { eps, .. } => {
                    let mode = if training {
                        NormMode::Train
                    } else {
                        NormMode::Eval {
                            mean: layer.running_mean.as_deref().expect("batch norm statistics"),
                            var: layer.running_var.as_deref().expect("batch norm statistics"),
                        }
                    };
                    let gamma = weights[i].expect("batch norm scale");
                    let beta = biases[i].expect("batch norm shift");
                    let (y, stats) = tape.batchnorm(arg(0)?, gamma, beta, mode, *eps)?;
                    if let Some(s) = stats {
                        bn_stats.push((i, s));
                    }
                    y
                }
                LayerKind::Add => {
                    let (a, b) = (arg(0)?, arg(1)?);
                    tape.add(a, b)?
                }
                LayerKind::ChannelBias => {
                    let b = tape.constant(layer.bias.clone().expect("channel bias values"));
                    tape.channel_bias(arg(0)?, b)?
                }
                LayerKind::Constant { shape } => tape.constant(constant_batch(
                    n,
                    shape,
                    layer.bias.as_ref().expect("constant values").data(),
                )?),
            };
            values.push(Some(out));
        }
        let logits = values[self.output_node()].ok_or_else(|| Error::Graph("graph has no output".into()))?;
        Ok(Forward {
            logits,
            params,
            bn_stats,
            smooth_gates,
        })
    }

    /// Inference-style evaluation. `input` may be one sample or a batch;
    /// the result has the matching form. `training` selects batch rather
    /// than running statistics in batch norms; running statistics are not
    /// updated.
    pub fn forward_gated(&self, input: &Tensor, training: bool) -> Result<Tensor> {
        let single = input.shape() == self.input.shape.as_slice();
        let batch = if single {
            let mut shape = vec![1];
            shape.extend_from_slice(input.shape());
            input.clone().reshape(shape)?
        } else {
            input.clone()
        };
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, &batch, training)?;
        let out = tape.value(fwd.logits).clone();
        if single {
            let shape = out.shape()[1..].to_vec();
            out.reshape(shape)
        } else {
            Ok(out)
        }
    }
}

/// `[n, shape...]` filled with one value per channel.
pub(crate) fn constant_batch(n: usize, shape: &[usize], values: &[f64]) -> Result<Tensor> {
    let inner: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(n * values.len() * inner);
    for _ in 0..n {
        for &v in values {
            data.extend(std::iter::repeat_n(v, inner));
        }
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}
