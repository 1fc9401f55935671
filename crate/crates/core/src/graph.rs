//! Network topology, parameters, and gate placement.
//!
//! Node 0 is the graph input; node `i + 1` is the output of `layers[i]`.
//! Layers may only read earlier nodes, so the layer list is a topological
//! order.
//!
//! Gate placement works on *channel spaces*: sets of tensors whose channel
//! axes are tied together because an op between them is channel-wise
//! (relu, batch norm, depthwise conv, pooling) or because an elementwise add
//! joins them. Every regular conv or dense layer is a gate site on the space
//! it reads. All sites on one space share one [`GateVector`], so removing a
//! channel removes it consistently on both sides of a skip connection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{Epsilon, GateMode, GateVector};
use crate::ops;
use crate::tensor::Tensor;

pub const INPUT: &str = "input";

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn bn_eps() -> f64 {
    1e-5
}
fn bn_momentum() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerKind {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    DepthwiseConv2d {
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
    },
    Dense {
        out_features: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Relu,
    AvgPool2d {
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
    },
    GlobalAvgPool,
    BatchNorm {
        #[serde(default = "bn_eps")]
        eps: f64,
        #[serde(default = "bn_momentum")]
        momentum: f64,
    },
    Add,
    /// Adds a fixed per-channel offset. Produced by pruning.
    ChannelBias,
    /// Per-channel constant broadcast over `shape`. Produced by pruning.
    Constant { shape: Vec<usize> },
}

impl LayerKind {
    /// Regular conv and dense layers mix channels and can carry a gate.
    pub fn is_gate_site(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Add => 2,
            LayerKind::Constant { .. } => 0,
            _ => 1,
        }
    }

    fn channel_preserving(&self) -> bool {
        matches!(
            self,
            LayerKind::DepthwiseConv2d { .. }
                | LayerKind::Relu
                | LayerKind::AvgPool2d { .. }
                | LayerKind::GlobalAvgPool
                | LayerKind::BatchNorm { .. }
                | LayerKind::Add
                | LayerKind::ChannelBias
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Node indices this layer reads.
    pub inputs: Vec<usize>,
    /// For gate sites: whether the site may carry a gate.
    pub gated: bool,
    /// Conv/dense kernel, depthwise kernel, or batch-norm scale.
    pub weight: Option<Tensor>,
    /// Layer bias, batch-norm shift, channel bias, or constant values.
    pub bias: Option<Tensor>,
    pub running_mean: Option<Vec<f64>>,
    pub running_var: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    /// Per-sample shape, `[c, h, w]` or `[m]`.
    pub shape: Vec<usize>,
    /// Raw input channels kept after pruning, in order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep: Option<Vec<usize>>,
}

impl InputSpec {
    pub fn image(c: usize, h: usize, w: usize) -> Self {
        Self { shape: vec![c, h, w], keep: None }
    }

    pub fn vector(m: usize) -> Self {
        Self { shape: vec![m], keep: None }
    }

    /// Per-sample shape after channel selection.
    pub fn effective_shape(&self) -> Vec<usize> {
        let mut s = self.shape.clone();
        if let Some(keep) = &self.keep {
            s[0] = keep.len();
        }
        s
    }
}

/// One gate vector and the consumer layers it scales.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGroup {
    pub sites: Vec<usize>,
    pub vector: GateVector,
}

/// Initial gate state used by [`NetworkGraph::attach_gates`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateInit {
    pub alpha: f64,
    pub epsilon: f64,
    pub mode: GateMode,
}

impl Default for GateInit {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 0.1,
            mode: GateMode::IntroducedParam,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub input: InputSpec,
    pub layers: Vec<Layer>,
    /// Extra sharing constraints: each entry lists gate-site layer names
    /// forced into one group.
    pub share: Vec<Vec<String>>,
    /// Attached gates, in topological order of their first site.
    pub gates: Vec<GateGroup>,
}

/// Static facts derived from a graph.
#[derive(Debug, Clone)]
pub struct Analysis {
    /// Per-sample shape of every node; `None` for an input whose channels
    /// were all pruned away.
    pub shapes: Vec<Option<Vec<usize>>>,
    /// Channel space of every node.
    pub space_of: Vec<usize>,
    pub space_channels: Vec<usize>,
    pub output_space: usize,
}

impl Analysis {
    pub fn shape(&self, node: usize) -> &[usize] {
        self.shapes[node].as_deref().unwrap_or(&[])
    }

    pub fn channels(&self, node: usize) -> usize {
        self.space_channels[self.space_of[node]]
    }
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Keep the smaller root so ids follow topological order.
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.0[hi] = lo;
    }
}

impl NetworkGraph {
    pub fn new(input: InputSpec) -> Self {
        Self {
            input,
            layers: Vec::new(),
            share: Vec::new(),
            gates: Vec::new(),
        }
    }

    pub fn output_node(&self) -> usize {
        self.layers.len()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        if name == INPUT {
            return Some(0);
        }
        self.layers.iter().position(|l| l.name == name).map(|i| i + 1)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn node_name(&self, node: usize) -> &str {
        if node == 0 {
            INPUT
        } else {
            &self.layers[node - 1].name
        }
    }

    /// Appends a layer reading the named nodes and allocates zeroed
    /// parameters of the right shape. Returns the new node index.
    pub fn push(&mut self, name: &str, kind: LayerKind, inputs: &[&str]) -> Result<usize> {
        let inputs = inputs
            .iter()
            .map(|n| {
                self.node_index(n)
                    .ok_or_else(|| Error::Graph(format!("layer {name:?} reads unknown node {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.push_resolved(name, kind, inputs)
    }

    /// Like [`push`](Self::push) but reading the previous node.
    pub fn then(&mut self, name: &str, kind: LayerKind) -> Result<usize> {
        let prev = self.output_node();
        self.push_resolved(name, kind, vec![prev])
    }

    pub(crate) fn push_resolved(&mut self, name: &str, kind: LayerKind, inputs: Vec<usize>) -> Result<usize> {
        if name == INPUT || self.layer_index(name).is_some() {
            return Err(Error::Graph(format!("duplicate layer name {name:?}")));
        }
        if inputs.len() != kind.arity() {
            return Err(Error::Graph(format!(
                "layer {name:?} needs {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        self.layers.push(Layer {
            name: name.to_string(),
            kind,
            inputs,
            gated: true,
            weight: None,
            bias: None,
            running_mean: None,
            running_var: None,
        });
        let analysis = match self.analyze() {
            Ok(a) => a,
            Err(e) => {
                self.layers.pop();
                return Err(e);
            }
        };
        let idx = self.layers.len() - 1;
        let (weight, bias, stats) = zero_params(&self.layers[idx], &analysis)?;
        let layer = &mut self.layers[idx];
        layer.weight = weight;
        layer.bias = bias;
        if let Some(c) = stats {
            layer.running_mean = Some(vec![0.0; c]);
            layer.running_var = Some(vec![1.0; c]);
        }
        Ok(idx + 1)
    }

    /// Shape inference and channel-space partition.
    pub fn analyze(&self) -> Result<Analysis> {
        let n_nodes = self.layers.len() + 1;
        let mut shapes: Vec<Option<Vec<usize>>> = Vec::with_capacity(n_nodes);
        let input_shape = self.input.effective_shape();
        if self.input.shape.is_empty() || self.input.shape.contains(&0) {
            return Err(Error::Graph(format!("bad input shape {:?}", self.input.shape)));
        }
        if let Some(keep) = &self.input.keep {
            if keep.iter().any(|&k| k >= self.input.shape[0]) || keep.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Graph(format!("bad input channel selection {keep:?}")));
            }
        }
        shapes.push((input_shape[0] > 0).then_some(input_shape));
        let mut uf = UnionFind((0..n_nodes).collect());

        for (i, layer) in self.layers.iter().enumerate() {
            let node = i + 1;
            if layer.inputs.iter().any(|&p| p >= node) {
                return Err(Error::Graph(format!("layer {:?} reads a later node", layer.name)));
            }
            if layer.inputs.len() != layer.kind.arity() {
                return Err(Error::Graph(format!("layer {:?} has wrong input count", layer.name)));
            }
            let ins: Vec<&[usize]> = layer
                .inputs
                .iter()
                .map(|&p| {
                    shapes[p]
                        .as_deref()
                        .ok_or_else(|| Error::Graph(format!("layer {:?} reads an empty input", layer.name)))
                })
                .collect::<Result<_>>()?;
            let bad = |msg: String| Error::Graph(format!("layer {:?}: {msg}", layer.name));
            let shape = match &layer.kind {
                LayerKind::Conv2d { out_channels, kernel, stride, padding, .. } => {
                    let [_, h, w] = *ins[0] else {
                        return Err(bad(format!("conv2d needs [c,h,w] input, got {:?}", ins[0])));
                    };
                    let (Some(ho), Some(wo)) =
                        (ops::out_extent(h, *kernel, *stride, *padding), ops::out_extent(w, *kernel, *stride, *padding))
                    else {
                        return Err(bad(format!("kernel {kernel} does not fit input {:?}", ins[0])));
                    };
                    vec![*out_channels, ho, wo]
                }
                LayerKind::DepthwiseConv2d { kernel, stride, padding, .. } => {
                    let [c, h, w] = *ins[0] else {
                        return Err(bad(format!("depthwise conv needs [c,h,w] input, got {:?}", ins[0])));
                    };
                    let (Some(ho), Some(wo)) =
                        (ops::out_extent(h, *kernel, *stride, *padding), ops::out_extent(w, *kernel, *stride, *padding))
                    else {
                        return Err(bad(format!("kernel {kernel} does not fit input {:?}", ins[0])));
                    };
                    vec![c, ho, wo]
                }
                LayerKind::Dense { out_features, .. } => {
                    if ins[0].len() != 1 {
                        return Err(bad(format!("dense needs a vector input, got {:?}", ins[0])));
                    }
                    vec![*out_features]
                }
                LayerKind::AvgPool2d { kernel, stride } => {
                    let [c, h, w] = *ins[0] else {
                        return Err(bad(format!("avgpool needs [c,h,w] input, got {:?}", ins[0])));
                    };
                    let (Some(ho), Some(wo)) = (ops::out_extent(h, *kernel, *stride, 0), ops::out_extent(w, *kernel, *stride, 0))
                    else {
                        return Err(bad(format!("window {kernel} does not fit input {:?}", ins[0])));
                    };
                    vec![c, ho, wo]
                }
                LayerKind::GlobalAvgPool => {
                    if ins[0].len() != 3 {
                        return Err(bad(format!("global pooling needs [c,h,w] input, got {:?}", ins[0])));
                    }
                    vec![ins[0][0]]
                }
                LayerKind::Add => {
                    if ins[0] != ins[1] {
                        return Err(Error::ShapeMismatch {
                            op: "add",
                            lhs: ins[0].to_vec(),
                            rhs: ins[1].to_vec(),
                        });
                    }
                    ins[0].to_vec()
                }
                LayerKind::Relu | LayerKind::BatchNorm { .. } | LayerKind::ChannelBias => ins[0].to_vec(),
                LayerKind::Constant { shape } => {
                    if shape.is_empty() || shape.contains(&0) {
                        return Err(bad(format!("bad constant shape {shape:?}")));
                    }
                    shape.clone()
                }
            };
            if layer.kind.channel_preserving() {
                for &p in &layer.inputs {
                    uf.union(node, p);
                }
            }
            shapes.push(Some(shape));
        }

        let mut root_to_space = vec![usize::MAX; n_nodes];
        let mut space_of = vec![0; n_nodes];
        let mut space_channels = Vec::new();
        for node in 0..n_nodes {
            let r = uf.find(node);
            if root_to_space[r] == usize::MAX {
                root_to_space[r] = space_channels.len();
                space_channels.push(shapes[r].as_ref().map_or(0, |s| s[0]));
            }
            space_of[node] = root_to_space[r];
        }
        let output_space = space_of[n_nodes - 1];
        Ok(Analysis {
            shapes,
            space_of,
            space_channels,
            output_space,
        })
    }

    /// Gate-site layer indices per share group, in topological order.
    pub fn plan_gate_groups(&self, analysis: &Analysis) -> Result<Vec<Vec<usize>>> {
        let n_spaces = analysis.space_channels.len();
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n_spaces];
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kind.is_gate_site() {
                consumers[analysis.space_of[layer.inputs[0]]].push(i);
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut group_of_site = vec![usize::MAX; self.layers.len()];
        for (space, sites) in consumers.iter().enumerate() {
            if sites.is_empty() || space == analysis.output_space {
                continue;
            }
            let gated = sites.iter().filter(|&&s| self.layers[s].gated).count();
            if gated == 0 {
                continue;
            }
            if gated != sites.len() {
                let names: Vec<&str> = sites.iter().map(|&s| self.layers[s].name.as_str()).collect();
                return Err(Error::Graph(format!(
                    "sites {names:?} share a channel space but only some of them are gated"
                )));
            }
            for &s in sites {
                group_of_site[s] = groups.len();
            }
            groups.push(sites.clone());
        }

        // Explicit share declarations merge whole groups.
        let mut uf = UnionFind((0..groups.len()).collect());
        for decl in &self.share {
            let mut ids = Vec::new();
            for name in decl {
                let li = self
                    .layer_index(name)
                    .ok_or_else(|| Error::Graph(format!("share declaration names unknown layer {name:?}")))?;
                if group_of_site[li] == usize::MAX {
                    return Err(Error::Graph(format!("share declaration names {name:?}, which is not a gate site")));
                }
                ids.push(group_of_site[li]);
            }
            for w in ids.windows(2) {
                let (a, b) = (w[0], w[1]);
                let (ca, cb) = (
                    analysis.channels(self.layers[groups[a][0]].inputs[0]),
                    analysis.channels(self.layers[groups[b][0]].inputs[0]),
                );
                if ca != cb {
                    return Err(Error::ShareGroup {
                        group: uf.find(a).min(uf.find(b)),
                        msg: format!("sites disagree on channel count ({ca} vs {cb})"),
                    });
                }
                uf.union(a, b);
            }
        }
        let mut merged: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
        for (g, sites) in groups.iter().enumerate() {
            merged[uf.find(g)].extend(sites);
        }
        let mut out: Vec<Vec<usize>> = merged.into_iter().filter(|s| !s.is_empty()).collect();
        for sites in &mut out {
            sites.sort_unstable();
        }
        out.sort_by_key(|s| s[0]);

        for (g, sites) in out.iter().enumerate() {
            let spatial: Vec<&[usize]> = sites
                .iter()
                .filter(|&&s| matches!(self.layers[s].kind, LayerKind::Conv2d { .. }))
                .map(|&s| &analysis.shape(self.layers[s].inputs[0])[1..])
                .collect();
            if spatial.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::ShareGroup {
                    group: g,
                    msg: format!("conv sites read different spatial resolutions {spatial:?}"),
                });
            }
        }
        Ok(out)
    }

    /// Attaches one fresh gate vector per share group.
    pub fn attach_gates(mut self, init: GateInit) -> Result<Self> {
        if !(init.epsilon > 0.0) {
            return Err(Error::NonPositiveEpsilon(init.epsilon));
        }
        let analysis = self.analyze()?;
        let plan = self.plan_gate_groups(&analysis)?;
        let mut gates = Vec::with_capacity(plan.len());
        for (g, sites) in plan.into_iter().enumerate() {
            let channels = analysis.channels(self.layers[sites[0]].inputs[0]);
            for &s in &sites {
                let c = analysis.channels(self.layers[s].inputs[0]);
                if c != channels {
                    return Err(Error::ShareGroup {
                        group: g,
                        msg: format!("site {:?} has {c} channels, expected {channels}", self.layers[s].name),
                    });
                }
            }
            let vector = match init.mode {
                GateMode::IntroducedParam => {
                    GateVector::new(vec![init.alpha; channels], Epsilon::Shared(init.epsilon), init.mode)?
                }
                GateMode::WeightNorm | GateMode::RegularizerOnly => {
                    let norms = self.site_norms(&sites)?;
                    let eps = norms.iter().map(|&n| if n > 0.0 { n / 10.0 } else { init.epsilon }).collect();
                    GateVector::new(norms, Epsilon::PerGate(eps), init.mode)?
                }
            };
            gates.push(GateGroup { sites, vector });
        }
        self.gates = gates;
        Ok(self)
    }

    /// Checks that stored gates match the placement rule.
    pub fn validate_gates(&self) -> Result<()> {
        let analysis = self.analyze()?;
        let plan = self.plan_gate_groups(&analysis)?;
        if self.gates.is_empty() {
            return Ok(());
        }
        if plan.len() != self.gates.len() {
            return Err(Error::Graph(format!(
                "{} gate groups stored, placement rule gives {}",
                self.gates.len(),
                plan.len()
            )));
        }
        for (g, (group, sites)) in self.gates.iter().zip(&plan).enumerate() {
            if &group.sites != sites {
                return Err(Error::ShareGroup {
                    group: g,
                    msg: format!("stored sites {:?} differ from placement {:?}", group.sites, sites),
                });
            }
            let c = analysis.channels(self.layers[sites[0]].inputs[0]);
            if group.vector.len() != c {
                return Err(Error::ShareGroup {
                    group: g,
                    msg: format!("gate vector has {} entries for {c} channels", group.vector.len()),
                });
            }
        }
        Ok(())
    }

    /// Joint input-channel norms of the given consumer kernels.
    pub fn site_norms(&self, sites: &[usize]) -> Result<Vec<f64>> {
        let kernels: Vec<(&[usize], &[f64])> = sites
            .iter()
            .map(|&s| {
                let w = self.layers[s].weight.as_ref().expect("gate sites carry weights");
                (w.shape(), w.data())
            })
            .collect();
        ops::input_channel_norms(&kernels)
    }

    /// Refreshes cached norms in the two weight-norm modes.
    pub fn sync_norm_gates(&mut self) -> Result<()> {
        for g in 0..self.gates.len() {
            if self.gates[g].vector.mode != GateMode::IntroducedParam {
                let norms = self.site_norms(&self.gates[g].sites)?;
                self.gates[g].vector.alpha = norms;
            }
        }
        Ok(())
    }

    /// Gate group index per channel space.
    pub fn group_of_space(&self, analysis: &Analysis) -> Vec<Option<usize>> {
        let mut out = vec![None; analysis.space_channels.len()];
        for (g, group) in self.gates.iter().enumerate() {
            for &s in &group.sites {
                out[analysis.space_of[self.layers[s].inputs[0]]] = Some(g);
            }
        }
        out
    }

    /// Gate group scaling the input of each layer, if any.
    pub fn site_groups(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.layers.len()];
        for (g, group) in self.gates.iter().enumerate() {
            for &s in &group.sites {
                out[s] = Some(g);
            }
        }
        out
    }

    pub fn gate_vectors(&self) -> Vec<&GateVector> {
        self.gates.iter().map(|g| &g.vector).collect()
    }

    pub fn total_gates(&self) -> usize {
        self.gates.iter().map(|g| g.vector.len()).sum()
    }

    pub fn zero_gates(&self) -> usize {
        self.gates.iter().map(|g| g.vector.zero_gate_count()).sum()
    }

    /// Pins every gate to `value` (test hook; see [`GateVector::forced`]).
    pub fn force_gates(&mut self, value: Option<f64>) {
        for g in &mut self.gates {
            g.vector.forced = value;
        }
    }

    /// Count of network weights, excluding gates and running statistics.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !matches!(l.kind, LayerKind::Constant { .. } | LayerKind::ChannelBias))
            .map(|l| l.weight.as_ref().map_or(0, Tensor::numel) + l.bias.as_ref().map_or(0, Tensor::numel))
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            if let Some(w) = &mut l.weight {
                w.zero_grad();
            }
            if let Some(b) = &mut l.bias {
                b.zero_grad();
            }
        }
    }
}

/// Shapes of a layer's parameters given the analysed input shapes.
fn zero_params(layer: &Layer, analysis: &Analysis) -> Result<(Option<Tensor>, Option<Tensor>, Option<usize>)> {
    let in_shape = layer.inputs.first().map(|&p| analysis.shape(p).to_vec()).unwrap_or_default();
    let t = |shape: &[usize]| Tensor::zeros(shape).with_grad();
    Ok(match &layer.kind {
        LayerKind::Conv2d { out_channels, kernel, bias, .. } => (
            Some(t(&[*out_channels, in_shape[0], *kernel, *kernel])),
            bias.then(|| t(&[*out_channels])),
            None,
        ),
        LayerKind::DepthwiseConv2d { kernel, bias, .. } => {
            (Some(t(&[in_shape[0], *kernel, *kernel])), bias.then(|| t(&[in_shape[0]])), None)
        }
        LayerKind::Dense { out_features, bias } => {
            (Some(t(&[*out_features, in_shape[0]])), bias.then(|| t(&[*out_features])), None)
        }
        LayerKind::BatchNorm { .. } => {
            let c = in_shape[0];
            (Some(Tensor::full(&[c], 1.0).with_grad()), Some(t(&[c])), Some(c))
        }
        LayerKind::ChannelBias => (None, Some(Tensor::zeros(&[in_shape[0]])), None),
        LayerKind::Constant { shape } => (None, Some(Tensor::zeros(&[shape[0]])), None),
        _ => (None, None, None),
    })
}
