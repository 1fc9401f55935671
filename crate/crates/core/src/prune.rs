//! Surgery on a trained gated network.
//!
//! Channels whose gate argument is exactly zero are cut from every tensor in
//! their share group; surviving gate values are multiplied into the input
//! slices of the consumer kernels. A consumer left with no input channels
//! becomes a per-channel constant (its bias). Constants are folded forward
//! through ops that carry no kernel MACs, and a skip add with a constant
//! branch becomes a channel bias, so a fully gated-off residual block
//! leaves behind only its bias contribution.

use std::fmt::Write as _;

use crate::data::argmax_rows;
use crate::error::{Error, Result};
use crate::graph::{InputSpec, Layer, LayerKind, NetworkGraph};
use crate::ops;
use crate::resource::count_macs;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub sites: Vec<String>,
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub groups: Vec<GroupReport>,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_before: usize,
    pub params_after: usize,
    /// Filled in by [`consistency_check`] when probes are available.
    pub max_deviation: Option<f64>,
    pub accuracy: Option<(f64, f64)>,
    /// Structural changes beyond plain channel removal.
    pub notes: Vec<String>,
}

impl PruneReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ratio = if self.flops_before == 0 { 1.0 } else { self.flops_after as f64 / self.flops_before as f64 };
        writeln!(s, "flops_before {}", self.flops_before).unwrap();
        writeln!(s, "flops_after {}", self.flops_after).unwrap();
        writeln!(s, "flops_ratio {ratio:.6}").unwrap();
        writeln!(s, "params_before {}", self.params_before).unwrap();
        writeln!(s, "params_after {}", self.params_after).unwrap();
        if let Some(d) = self.max_deviation {
            writeln!(s, "max_logit_deviation {d:e}").unwrap();
        }
        if let Some((a, b)) = self.accuracy {
            writeln!(s, "accuracy_super {a:.6}").unwrap();
            writeln!(s, "accuracy_pruned {b:.6}").unwrap();
        }
        for (g, r) in self.groups.iter().enumerate() {
            writeln!(
                s,
                "group {g} sites [{}] kept {}/{} removed {:?}",
                r.sites.join(", "),
                r.kept.len(),
                r.kept.len() + r.removed.len(),
                r.removed
            )
            .unwrap();
        }
        for n in &self.notes {
            writeln!(s, "note {n}").unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        let mut s = String::from("group,sites,channels,kept,removed,removed_indices\n");
        for (g, r) in self.groups.iter().enumerate() {
            writeln!(
                s,
                "{g},{},{},{},{},{}",
                r.sites.join(";"),
                r.kept.len() + r.removed.len(),
                r.kept.len(),
                r.removed.len(),
                join(&r.removed)
            )
            .unwrap();
        }
        s
    }
}

/// Where an old node ended up in the pruned graph.
#[derive(Debug, Clone)]
enum Mapped {
    /// Every channel of this node was removed.
    Gone,
    Node(usize),
    /// Spatially uniform per-channel values; materialized on demand.
    Const { values: Vec<f64>, shape: Vec<usize>, node: Option<usize> },
}

struct Builder {
    graph: NetworkGraph,
    notes: Vec<String>,
}

impl Builder {
    fn add(&mut self, name: &str, kind: LayerKind, inputs: Vec<usize>, gated: bool, weight: Option<Tensor>, bias: Option<Tensor>) -> Result<usize> {
        let node = self.graph.push_resolved(name, kind, inputs)?;
        let layer = &mut self.graph.layers[node - 1];
        layer.gated = gated;
        if weight.is_some() {
            layer.weight = weight;
        }
        if bias.is_some() {
            layer.bias = bias;
        }
        Ok(node)
    }

    fn materialize(&mut self, name: &str, m: &mut Mapped) -> Result<usize> {
        match m {
            Mapped::Node(n) => Ok(*n),
            Mapped::Gone => Err(Error::Graph(format!("node {name:?} has no channels left"))),
            Mapped::Const { node: Some(n), .. } => Ok(*n),
            Mapped::Const { values, shape, node } => {
                let n = self.add(
                    name,
                    LayerKind::Constant { shape: shape.clone() },
                    vec![],
                    true,
                    None,
                    Some(Tensor::from_vec(values.clone())),
                )?;
                self.notes.push(format!("{name}: replaced by a per-channel constant"));
                *node = Some(n);
                Ok(n)
            }
        }
    }
}

fn pick(data: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| data[i]).collect()
}

fn pick_tensor(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::from_vec(pick(t.data(), idx));
    out.requires_grad = t.requires_grad;
    out
}

/// Rows `out` and input columns `inp` of a `[d, c, ...]` kernel, with each
/// kept input column scaled by `gains[col]`.
fn slice_kernel(w: &Tensor, out: &[usize], inp: &[usize], gains: &[f64]) -> Result<Tensor> {
    let shape = w.shape();
    let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
    let mut data = Vec::with_capacity(out.len() * inp.len() * inner);
    for &o in out {
        for &i in inp {
            let g = gains[i];
            data.extend(w.data()[(o * c + i) * inner..][..inner].iter().map(|v| v * g));
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = out.len();
    new_shape[1] = inp.len();
    let mut t = Tensor::new(new_shape, data)?;
    t.requires_grad = w.requires_grad;
    Ok(t)
}

fn with_channels(shape: &[usize], c: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[0] = c;
    s
}

/// Removes zero-gated channels and absorbs the remaining gates. The result
/// carries no gates.
pub fn absorb_and_remove(graph: &NetworkGraph) -> Result<(NetworkGraph, PruneReport)> {
    graph.validate_gates()?;
    let mut graph = graph.clone();
    graph.sync_norm_gates()?;
    let analysis = graph.analyze()?;
    let group_of_space = graph.group_of_space(&analysis);
    let site_groups = graph.site_groups();
    let gains: Vec<Vec<f64>> = graph.gates.iter().map(|g| g.vector.values()).collect();

    let kept: Vec<Vec<usize>> = (0..analysis.space_channels.len())
        .map(|s| match group_of_space[s] {
            Some(g) => (0..analysis.space_channels[s]).filter(|&i| !graph.gates[g].vector.is_zero(i)).collect(),
            None => (0..analysis.space_channels[s]).collect(),
        })
        .collect();
    let kept_at = |node: usize| &kept[analysis.space_of[node]];

    let groups: Vec<GroupReport> = graph
        .gates
        .iter()
        .map(|g| {
            let v = &g.vector;
            GroupReport {
                sites: g.sites.iter().map(|&s| graph.layers[s].name.clone()).collect(),
                kept: (0..v.len()).filter(|&i| !v.is_zero(i)).collect(),
                removed: (0..v.len()).filter(|&i| v.is_zero(i)).collect(),
            }
        })
        .collect();
    let mut notes = Vec::new();
    for (g, r) in groups.iter().enumerate() {
        if r.kept.is_empty() {
            notes.push(format!("group {g} fully removed (sites {})", r.sites.join(", ")));
        }
    }

    let input_kept = kept_at(0);
    let keep = if input_kept.len() == analysis.space_channels[analysis.space_of[0]] {
        graph.input.keep.clone()
    } else {
        Some(match &graph.input.keep {
            Some(old) => input_kept.iter().map(|&j| old[j]).collect(),
            None => input_kept.clone(),
        })
    };
    let mut b = Builder {
        graph: NetworkGraph::new(InputSpec { shape: graph.input.shape.clone(), keep }),
        notes,
    };
    let mut mapped: Vec<Mapped> = Vec::with_capacity(graph.layers.len() + 1);
    mapped.push(if input_kept.is_empty() { Mapped::Gone } else { Mapped::Node(0) });

    for (i, layer) in graph.layers.iter().enumerate() {
        let out = i + 1;
        let ko = kept_at(out).clone();
        let shape = with_channels(analysis.shape(out), ko.len());
        if ko.is_empty() {
            mapped.push(Mapped::Gone);
            continue;
        }
        let Layer { name, kind, inputs, gated, weight, bias, .. } = layer;
        let m = match kind {
            LayerKind::Conv2d { .. } | LayerKind::Dense { .. } => {
                let input = inputs[0];
                let ki = kept_at(input).clone();
                let bias_kept = bias.as_ref().map(|t| pick_tensor(t, &ko));
                if matches!(mapped[input], Mapped::Gone) {
                    let values = bias_kept.map_or_else(|| vec![0.0; ko.len()], Tensor::into_data);
                    Mapped::Const { values, shape, node: None }
                } else {
                    let ones;
                    let g = match site_groups[i] {
                        Some(g) => &gains[g],
                        None => {
                            ones = vec![1.0; analysis.channels(input)];
                            &ones
                        }
                    };
                    let w = slice_kernel(weight.as_ref().expect("kernel"), &ko, &ki, g)?;
                    let src = b.materialize(graph.node_name(input), &mut mapped[input])?;
                    let kind = match kind {
                        LayerKind::Conv2d { kernel, stride, padding, bias, .. } => LayerKind::Conv2d {
                            out_channels: ko.len(),
                            kernel: *kernel,
                            stride: *stride,
                            padding: *padding,
                            bias: *bias,
                        },
                        LayerKind::Dense { bias, .. } => LayerKind::Dense { out_features: ko.len(), bias: *bias },
                        _ => unreachable!(),
                    };
                    Mapped::Node(b.add(name, kind, vec![src], *gated, Some(w), bias_kept)?)
                }
            }
            LayerKind::DepthwiseConv2d { .. } => {
                let src = b.materialize(graph.node_name(inputs[0]), &mut mapped[inputs[0]])?;
                let w = weight.as_ref().expect("kernel");
                let inner = w.shape()[1] * w.shape()[2];
                let data: Vec<f64> = ko.iter().flat_map(|&c| w.data()[c * inner..][..inner].iter().copied()).collect();
                let mut wt = Tensor::new(with_channels(w.shape(), ko.len()), data)?;
                wt.requires_grad = w.requires_grad;
                Mapped::Node(b.add(name, kind.clone(), vec![src], *gated, Some(wt), bias.as_ref().map(|t| pick_tensor(t, &ko)))?)
            }
            LayerKind::BatchNorm { eps, .. } => {
                let gamma = pick(weight.as_ref().expect("scale").data(), &ko);
                let beta = pick(bias.as_ref().expect("shift").data(), &ko);
                let mean = pick(layer.running_mean.as_deref().expect("statistics"), &ko);
                let var = pick(layer.running_var.as_deref().expect("statistics"), &ko);
                match &mapped[inputs[0]] {
                    Mapped::Const { values, .. } => {
                        let (y, _, _) = ops::batchnorm_forward((1, ko.len(), 1), values, &mean, &var, &gamma, &beta, *eps);
                        Mapped::Const { values: y, shape, node: None }
                    }
                    _ => {
                        let src = b.materialize(graph.node_name(inputs[0]), &mut mapped[inputs[0]])?;
                        let mut gt = Tensor::from_vec(gamma);
                        gt.requires_grad = true;
                        let mut bt = Tensor::from_vec(beta);
                        bt.requires_grad = true;
                        let n = b.add(name, kind.clone(), vec![src], *gated, Some(gt), Some(bt))?;
                        let l = &mut b.graph.layers[n - 1];
                        l.running_mean = Some(mean);
                        l.running_var = Some(var);
                        Mapped::Node(n)
                    }
                }
            }
            LayerKind::Relu | LayerKind::AvgPool2d { .. } | LayerKind::GlobalAvgPool => match &mapped[inputs[0]] {
                Mapped::Const { values, .. } => {
                    let values = if matches!(kind, LayerKind::Relu) {
                        values.iter().map(|&v| ops::relu(v)).collect()
                    } else {
                        values.clone()
                    };
                    Mapped::Const { values, shape, node: None }
                }
                _ => {
                    let src = b.materialize(graph.node_name(inputs[0]), &mut mapped[inputs[0]])?;
                    Mapped::Node(b.add(name, kind.clone(), vec![src], *gated, None, None)?)
                }
            },
            LayerKind::ChannelBias => {
                let bk = pick(bias.as_ref().expect("bias").data(), &ko);
                match &mapped[inputs[0]] {
                    Mapped::Const { values, .. } => Mapped::Const {
                        values: values.iter().zip(&bk).map(|(v, b)| v + b).collect(),
                        shape,
                        node: None,
                    },
                    _ => {
                        let src = b.materialize(graph.node_name(inputs[0]), &mut mapped[inputs[0]])?;
                        Mapped::Node(b.add(name, kind.clone(), vec![src], *gated, None, Some(Tensor::from_vec(bk)))?)
                    }
                }
            }
            LayerKind::Constant { .. } => Mapped::Const {
                values: pick(bias.as_ref().expect("values").data(), &ko),
                shape,
                node: None,
            },
            LayerKind::Add => {
                let (l, r) = (inputs[0], inputs[1]);
                match (&mapped[l], &mapped[r]) {
                    (Mapped::Const { values: a, .. }, Mapped::Const { values: c, .. }) => Mapped::Const {
                        values: a.iter().zip(c).map(|(x, y)| x + y).collect(),
                        shape,
                        node: None,
                    },
                    (Mapped::Const { values, .. }, _) | (_, Mapped::Const { values, .. }) => {
                        let values = values.clone();
                        let other = if matches!(mapped[l], Mapped::Const { .. }) { r } else { l };
                        let src = b.materialize(graph.node_name(other), &mut mapped[other])?;
                        b.notes.push(format!("{name}: constant branch folded into a channel bias"));
                        Mapped::Node(b.add(name, LayerKind::ChannelBias, vec![src], *gated, None, Some(Tensor::from_vec(values)))?)
                    }
                    _ => {
                        let sl = b.materialize(graph.node_name(l), &mut mapped[l])?;
                        let sr = b.materialize(graph.node_name(r), &mut mapped[r])?;
                        Mapped::Node(b.add(name, LayerKind::Add, vec![sl, sr], *gated, None, None)?)
                    }
                }
            }
        };
        mapped.push(m);
    }
    let last = graph.output_node();
    let out = b.materialize(graph.node_name(last), &mut mapped[last])?;
    if out != b.graph.output_node() {
        return Err(Error::Graph("pruned output is not the last node".into()));
    }
    let mut pruned = b.graph;
    pruned.share = graph
        .share
        .iter()
        .map(|names| names.iter().filter(|n| pruned.layer_index(n).is_some_and(|i| pruned.layers[i].kind.is_gate_site())).cloned().collect::<Vec<_>>())
        .filter(|names| names.len() >= 2)
        .collect();
    let report = PruneReport {
        groups,
        flops_before: count_macs(&graph)?,
        flops_after: count_macs(&pruned)?,
        params_before: graph.param_count(),
        params_after: pruned.param_count(),
        max_deviation: None,
        accuracy: None,
        notes: b.notes,
    };
    Ok((pruned, report))
}

/// Inference-mode comparison on probe batches. Returns the largest logit
/// difference and, when labels are supplied, the accuracy pair
/// `(super, pruned)`.
pub fn consistency_check(
    super_graph: &NetworkGraph,
    pruned: &NetworkGraph,
    probes: &[Tensor],
    labels: Option<&[Vec<usize>]>,
) -> Result<(f64, Option<(f64, f64)>)> {
    let mut max_dev: f64 = 0.0;
    let (mut hit_a, mut hit_b, mut total) = (0usize, 0usize, 0usize);
    for (i, x) in probes.iter().enumerate() {
        let a = super_graph.forward_gated(x, false)?;
        let b = pruned.forward_gated(x, false)?;
        max_dev = max_dev.max(a.max_abs_diff(&b)?);
        if let Some(labels) = labels {
            let y = &labels[i];
            let (pa, pb) = (argmax_rows(&a), argmax_rows(&b));
            hit_a += pa.iter().zip(y).filter(|(p, t)| p == t).count();
            hit_b += pb.iter().zip(y).filter(|(p, t)| p == t).count();
            total += y.len();
        }
    }
    let acc = labels.map(|_| {
        let t = total.max(1) as f64;
        (hit_a as f64 / t, hit_b as f64 / t)
    });
    Ok((max_dev, acc))
}
