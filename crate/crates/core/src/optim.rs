//! Gradient step on the task loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gate::GateMode;
use crate::graph::NetworkGraph;
use crate::network::ParamRef;
use crate::resource::ResourceModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gate arguments move with `lr * alpha_lr_scale`, without momentum or decay.
    pub alpha_lr_scale: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha_lr_scale: 0.1,
        }
    }
}

/// Momentum buffers for the network weights.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub cfg: SgdConfig,
    weight_velocity: Vec<Option<Vec<f64>>>,
    bias_velocity: Vec<Option<Vec<f64>>>,
}

/// Differentiable resource term added to the loss in regularizer-only mode.
#[derive(Debug, Clone, Copy)]
pub struct Penalty<'a> {
    pub model: &'a ResourceModel,
    pub lambda: f64,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            weight_velocity: Vec::new(),
            bias_velocity: Vec::new(),
        }
    }

    fn update(&mut self, graph: &mut NetworkGraph, which: ParamRef, lr: f64) {
        let (slot, tensor, i) = match which {
            ParamRef::Weight(i) => (&mut self.weight_velocity, graph.layers[i].weight.as_mut(), i),
            ParamRef::Bias(i) => (&mut self.bias_velocity, graph.layers[i].bias.as_mut(), i),
            ParamRef::Alpha(_) => return,
        };
        let Some(t) = tensor else { return };
        let Some(grad) = t.grad().map(<[f64]>::to_vec) else { return };
        if slot.len() <= i {
            slot.resize(i + 1, None);
        }
        let v = slot[i].get_or_insert_with(|| vec![0.0; grad.len()]);
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for ((w, g), v) in t.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
            *v = mu * *v + g + wd * *w;
            *w -= lr * *v;
        }
        t.zero_grad();
    }

    /// One minibatch step on the cross-entropy loss (plus the smooth resource
    /// term when `penalty` is given). Returns the loss before the update.
    pub fn loss_step(
        &mut self,
        graph: &mut NetworkGraph,
        inputs: &Tensor,
        labels: &[usize],
        lr: f64,
        penalty: Option<Penalty<'_>>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = graph.forward_tape(&mut tape, inputs, true)?;
        let mut loss = tape.softmax_cross_entropy(fwd.logits, labels)?;
        if let Some(p) = penalty.filter(|p| p.lambda > 0.0) {
            let mut sums = Vec::with_capacity(fwd.smooth_gates.len());
            for s in &fwd.smooth_gates {
                let s = s.ok_or_else(|| Error::invalid("loss_step", "resource penalty needs differentiable gates"))?;
                sums.push(tape.sum(s)?);
            }
            let pairs: Vec<(usize, usize, f64)> = p.model.pairs.iter().map(|&(l, k, a)| (l, k, a as f64)).collect();
            let linear: Vec<f64> = p.model.linear.iter().map(|&b| b as f64).collect();
            let r = tape.bilinear(&sums, &pairs, &linear)?;
            let r = tape.scale(r, p.lambda)?;
            loss = tape.add(loss, r)?;
        }
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss(value));
        }
        let grads = tape.backward(loss)?;

        for &(which, var) in &fwd.params {
            let Some(g) = grads.wrt(var) else { continue };
            match which {
                ParamRef::Weight(i) => graph.layers[i].weight.as_mut().expect("bound weight").accumulate_grad(g)?,
                ParamRef::Bias(i) => graph.layers[i].bias.as_mut().expect("bound bias").accumulate_grad(g)?,
                ParamRef::Alpha(gi) => {
                    let step = lr * self.cfg.alpha_lr_scale;
                    for (a, d) in graph.gates[gi].vector.alpha.iter_mut().zip(g) {
                        *a -= step * d;
                    }
                }
            }
        }
        for &(which, _) in &fwd.params {
            self.update(graph, which, lr);
        }
        for (i, stats) in fwd.bn_stats {
            let layer = &mut graph.layers[i];
            let crate::graph::LayerKind::BatchNorm { momentum, .. } = layer.kind else {
                unreachable!("statistics come from batch norms")
            };
            let mean = layer.running_mean.as_mut().expect("batch norm statistics");
            for (r, b) in mean.iter_mut().zip(&stats.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            let var = layer.running_var.as_mut().expect("batch norm statistics");
            for (r, b) in var.iter_mut().zip(&stats.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
        if graph.gates.iter().any(|g| g.vector.mode != GateMode::IntroducedParam) {
            graph.sync_norm_gates()?;
        }
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::Epsilon;
    use crate::graph::{GateInit, InputSpec, LayerKind};
    use crate::zoo;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(seed: u64, n: usize) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(vec![n, 3, 6, 6], (0..n * 108).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (x, (0..n).map(|i| i % 3).collect())
    }

    #[test]
    fn forced_unit_gates_follow_plain_sgd() {
        let plain = zoo::depthwise_block(3);
        let mut gated = plain.clone().attach_gates(GateInit::default()).unwrap();
        gated.force_gates(Some(1.0));
        let mut plain = plain;
        let (mut o1, mut o2) = (Sgd::new(SgdConfig::default()), Sgd::new(SgdConfig::default()));
        for s in 0..5 {
            let (x, y) = batch(s, 4);
            let a = o1.loss_step(&mut plain, &x, &y, 0.05, None).unwrap();
            let b = o2.loss_step(&mut gated, &x, &y, 0.05, None).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (p, g) in plain.layers.iter().zip(&gated.layers) {
            assert_eq!(p.weight.as_ref().map(Tensor::data), g.weight.as_ref().map(Tensor::data));
        }
    }

    #[test]
    fn zero_alpha_is_not_moved_by_loss() {
        let mut net = zoo::plain_chain(1);
        net.then("pool", LayerKind::GlobalAvgPool).unwrap();
        let mut net = net.attach_gates(GateInit::default()).unwrap();
        net.gates[1].vector.alpha[2] = 0.0;
        let before = net.gates.iter().map(|g| g.vector.alpha.clone()).collect::<Vec<_>>();
        let (x, _) = batch(9, 3);
        let mut opt = Sgd::new(SgdConfig::default());
        opt.loss_step(&mut net, &x, &[0, 1, 4], 0.5, None).unwrap();
        assert_eq!(net.gates[1].vector.alpha[2].to_bits(), 0.0f64.to_bits());
        assert_ne!(net.gates[1].vector.alpha[0], before[1][0]);
    }

    #[test]
    fn scalar_gate_gradient_matches_finite_difference() {
        // y = g(alpha) * x through a 1x1 dense layer with unit weight; loss = mse.
        let mut g = NetworkGraph::new(InputSpec::vector(1));
        g.then("w", LayerKind::Dense { out_features: 1, bias: false }).unwrap();
        g.layers[0].weight = Some(Tensor::new(vec![1, 1], vec![1.0]).unwrap().with_grad());
        g.then("out", LayerKind::Dense { out_features: 1, bias: false }).unwrap();
        g.layers[1].weight = Some(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        g.layers[1].gated = false;
        let mut g = g.attach_gates(GateInit::default()).unwrap();
        g.gates[0].vector.alpha = vec![0.7];
        g.gates[0].vector.epsilon = Epsilon::Shared(0.05);
        let (x, target) = (1.3, 0.4);
        let loss_at = |alpha: f64| {
            let y = alpha * alpha / (alpha * alpha + 0.05) * x;
            (y - target) * (y - target)
        };
        let mut tape = Tape::new();
        let fwd = g.forward_tape(&mut tape, &Tensor::new(vec![1, 1], vec![x]).unwrap(), false).unwrap();
        let loss = tape.mse(fwd.logits, &[target]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let alpha_var = fwd.params.iter().find(|(p, _)| *p == ParamRef::Alpha(0)).unwrap().1;
        let analytic = grads.wrt(alpha_var).unwrap()[0];
        let h = 1e-6;
        let fd = (loss_at(0.7 + h) - loss_at(0.7 - h)) / (2.0 * h);
        assert!((analytic - fd).abs() / fd.abs() < 1e-6, "{analytic} vs {fd}");
    }

    #[test]
    fn non_finite_loss_aborts_before_update() {
        let mut g = zoo::depthwise_block(0).attach_gates(GateInit::default()).unwrap();
        let (mut x, y) = batch(1, 2);
        x.data_mut()[0] = f64::NAN;
        let before = g.clone();
        let err = Sgd::new(SgdConfig::default()).loss_step(&mut g, &x, &y, 0.1, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(_)));
        assert_eq!(g, before);
    }

    #[test]
    fn regularizer_penalty_gradient_matches_finite_difference() {
        let mut g = zoo::plain_chain(4);
        g.then("pool", LayerKind::GlobalAvgPool).unwrap();
        let g = g.attach_gates(GateInit { mode: GateMode::RegularizerOnly, ..GateInit::default() }).unwrap();
        let model = crate::resource::derive_coefficients(&g).unwrap();
        let lambda = 1e-4;
        let (x, y) = batch(2, 2);
        let total = |graph: &NetworkGraph| {
            let mut tape = Tape::new();
            let fwd = graph.forward_tape(&mut tape, &x, true).unwrap();
            let mut loss = tape.softmax_cross_entropy(fwd.logits, &y).unwrap();
            let sums: Vec<_> = fwd.smooth_gates.iter().map(|s| tape.sum(s.unwrap()).unwrap()).collect();
            let pairs: Vec<_> = model.pairs.iter().map(|&(l, k, a)| (l, k, a as f64)).collect();
            let linear: Vec<_> = model.linear.iter().map(|&b| b as f64).collect();
            let r = tape.bilinear(&sums, &pairs, &linear).unwrap();
            let r = tape.scale(r, lambda).unwrap();
            loss = tape.add(loss, r).unwrap();
            let grads = tape.backward(loss).unwrap();
            let wv = fwd.params.iter().find(|(p, _)| *p == ParamRef::Weight(2)).unwrap().1;
            (tape.value(loss).data()[0], grads.wrt(wv).unwrap().to_vec())
        };
        let (_, analytic) = total(&g);
        let h = 1e-5;
        for idx in [0, 7, 50] {
            let mut plus = g.clone();
            plus.layers[2].weight.as_mut().unwrap().data_mut()[idx] += h;
            let mut minus = g.clone();
            minus.layers[2].weight.as_mut().unwrap().data_mut()[idx] -= h;
            let fd = (total(&plus).0 - total(&minus).0) / (2.0 * h);
            let err = (analytic[idx] - fd).abs() / fd.abs().max(1.0);
            assert!(err < 1e-6, "entry {idx}: {} vs {fd}", analytic[idx]);
        }
    }
}
