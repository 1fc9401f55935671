//! Bilinear MAC model over gate-group channel counts.
//!
//! `R(c) = sum_{l<k} a_lk c_l c_k + sum_l b_l c_l + constant`, where `c_l` is
//! the surviving channel count of gate group `l`. Each unordered pair is
//! stored once. The constant collects kernels whose input and output are
//! both ungated; it is zero whenever the raw input is gated.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gate::GateVector;
use crate::graph::{LayerKind, NetworkGraph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceModel {
    /// `(l, k, a_lk)` with `l < k`, sorted.
    pub pairs: Vec<(usize, usize, u64)>,
    pub linear: Vec<u64>,
    pub constant: u64,
}

impl ResourceModel {
    pub fn groups(&self) -> usize {
        self.linear.len()
    }

    pub fn coefficient(&self, l: usize, k: usize) -> u64 {
        let key = (l.min(k), l.max(k));
        self.pairs
            .binary_search_by_key(&key, |&(a, b, _)| (a, b))
            .map_or(0, |i| self.pairs[i].2)
    }

    /// `sum_{k != l} a_lk c_k + b_l`: the per-channel cost of group `l`
    /// given the other groups' counts.
    pub fn marginal(&self, l: usize, counts: &[usize]) -> u64 {
        let mut acc = self.linear[l];
        for &(a, b, coef) in &self.pairs {
            if a == l {
                acc += coef * counts[b] as u64;
            } else if b == l {
                acc += coef * counts[a] as u64;
            }
        }
        acc
    }

    pub fn flops_of_counts(&self, counts: &[i64]) -> Result<u64> {
        if counts.len() != self.groups() {
            return Err(Error::Misaligned(format!(
                "{} counts for {} gate groups",
                counts.len(),
                self.groups()
            )));
        }
        if let Some(&c) = counts.iter().find(|&&c| c < 0) {
            return Err(Error::NegativeCount(c));
        }
        let c: Vec<usize> = counts.iter().map(|&c| c as usize).collect();
        Ok(self.eval(&c))
    }

    pub(crate) fn eval(&self, counts: &[usize]) -> u64 {
        let bilinear: u64 = self.pairs.iter().map(|&(l, k, a)| a * counts[l] as u64 * counts[k] as u64).sum();
        let linear: u64 = self.linear.iter().zip(counts).map(|(&b, &c)| b * c as u64).sum();
        bilinear + linear + self.constant
    }

    /// MACs at the gates' `||alpha||_0` counts.
    pub fn flops_of_gates(&self, gates: &[&GateVector]) -> Result<u64> {
        if gates.len() != self.groups() {
            return Err(Error::Misaligned(format!(
                "{} gate vectors for {} gate groups",
                gates.len(),
                self.groups()
            )));
        }
        let counts: Vec<usize> = gates.iter().map(|g| g.l0_norm()).collect();
        Ok(self.eval(&counts))
    }

    /// `group_l,group_k,a_lk` rows, one per stored pair.
    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("group_l,group_k,a_lk\n");
        for &(l, k, a) in &self.pairs {
            writeln!(out, "{l},{k},{a}").expect("writing to a String");
        }
        out
    }

    /// `group_l,b_l` rows.
    pub fn linear_csv(&self) -> String {
        let mut out = String::from("group_l,b_l\n");
        for (l, b) in self.linear.iter().enumerate() {
            writeln!(out, "{l},{b}").expect("writing to a String");
        }
        out
    }
}

/// Derives the model from the graph's attached gate groups. A graph
/// without gates yields a model with no groups whose constant is the full
/// MAC count.
pub fn derive_coefficients(graph: &NetworkGraph) -> Result<ResourceModel> {
    let analysis = graph.analyze()?;
    let group_of_space = graph.group_of_space(&analysis);
    let group = |node: usize| group_of_space[analysis.space_of[node]];
    let mut pairs: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut linear = vec![0u64; graph.gates.len()];
    let mut constant = 0u64;

    for (i, layer) in graph.layers.iter().enumerate() {
        let out = i + 1;
        let per = match &layer.kind {
            LayerKind::Conv2d { kernel, .. } => {
                let s = analysis.shape(out);
                (kernel * kernel * s[1] * s[2]) as u64
            }
            LayerKind::Dense { .. } => 1,
            LayerKind::DepthwiseConv2d { kernel, .. } => {
                let s = analysis.shape(out);
                let per = (kernel * kernel * s[1] * s[2]) as u64;
                match group(layer.inputs[0]) {
                    Some(l) => linear[l] += per,
                    None => constant += per * s[0] as u64,
                }
                continue;
            }
            _ => continue,
        };
        let input = layer.inputs[0];
        if analysis.shapes[input].is_none() {
            continue;
        }
        let (cin, cout) = (analysis.channels(input) as u64, analysis.channels(out) as u64);
        match (group(input), group(out)) {
            (Some(l), Some(k)) if l == k => {
                return Err(Error::ShareGroup {
                    group: l,
                    msg: format!("layer {:?} maps the group onto itself", layer.name),
                })
            }
            (Some(l), Some(k)) => *pairs.entry((l.min(k), l.max(k))).or_default() += per,
            (Some(l), None) => linear[l] += per * cout,
            (None, Some(k)) => linear[k] += per * cin,
            (None, None) => constant += per * cin * cout,
        }
    }
    Ok(ResourceModel {
        pairs: pairs.into_iter().map(|((l, k), a)| (l, k, a)).collect(),
        linear,
        constant,
    })
}

/// Direct MAC count of conv, depthwise and dense kernels at their actual
/// shapes.
pub fn count_macs(graph: &NetworkGraph) -> Result<u64> {
    let analysis = graph.analyze()?;
    let mut total = 0u64;
    for (i, layer) in graph.layers.iter().enumerate() {
        let out = analysis.shape(i + 1);
        let macs = match &layer.kind {
            LayerKind::Conv2d { kernel, .. } => {
                let cin = analysis.shape(layer.inputs[0])[0];
                cin * out[0] * kernel * kernel * out[1] * out[2]
            }
            LayerKind::DepthwiseConv2d { kernel, .. } => out[0] * kernel * kernel * out[1] * out[2],
            LayerKind::Dense { .. } => analysis.shape(layer.inputs[0])[0] * out[0],
            _ => 0,
        };
        total += macs as u64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GateInit, InputSpec};
    use crate::zoo;

    fn conv(out: usize, k: usize, s: usize, p: usize) -> LayerKind {
        LayerKind::Conv2d { out_channels: out, kernel: k, stride: s, padding: p, bias: false }
    }

    #[test]
    fn single_conv_linear_term() {
        // 3 gated input channels, 8 ungated outputs, 3x3 kernel, 4x4 output.
        let mut g = NetworkGraph::new(InputSpec::image(3, 6, 6));
        g.then("c", conv(8, 3, 1, 0)).unwrap();
        let g = g.attach_gates(GateInit::default()).unwrap();
        let m = derive_coefficients(&g).unwrap();
        assert_eq!(m.linear, vec![1152]);
        assert!(m.pairs.is_empty());
        assert_eq!(m.flops_of_counts(&[3]).unwrap(), 3456);
        assert_eq!(count_macs(&g).unwrap(), 3456);
    }

    #[test]
    fn depthwise_linear_term() {
        let mut g = NetworkGraph::new(InputSpec::image(2, 4, 4));
        g.then("c", conv(8, 1, 1, 0)).unwrap();
        g.then("dw", LayerKind::DepthwiseConv2d { kernel: 3, stride: 1, padding: 1, bias: false }).unwrap();
        g.then("out", conv(2, 1, 1, 0)).unwrap();
        let g = g.attach_gates(GateInit::default()).unwrap();
        let m = derive_coefficients(&g).unwrap();
        // group 1 is the 8-channel space: depthwise 9*16 plus the output conv 1*16*2
        assert_eq!(m.linear[1], 144 + 32);
        assert_eq!(m.coefficient(0, 1), 16);
        let mut dw_only = m.clone();
        dw_only.linear[1] -= 32;
        dw_only.pairs.clear();
        dw_only.linear[0] = 0;
        assert_eq!(dw_only.flops_of_counts(&[2, 8]).unwrap(), 1152);
    }

    #[test]
    fn chained_convs_accumulate_shared_pair() {
        // a: x -> S, b: S -> T, c: T -> S via explicit sharing of a's and c's outputs
        let mut g = NetworkGraph::new(InputSpec::image(3, 5, 5));
        g.then("a", conv(4, 3, 1, 1)).unwrap();
        g.then("b", conv(6, 3, 1, 1)).unwrap();
        g.then("c", conv(4, 1, 1, 0)).unwrap();
        g.then("d", conv(2, 3, 1, 0)).unwrap();
        g.share.push(vec!["b".into(), "d".into()]);
        let g = g.attach_gates(GateInit::default()).unwrap();
        let m = derive_coefficients(&g).unwrap();
        // groups: 0 = image, 1 = {b, d} inputs (4 ch), 2 = c input (6 ch)
        assert_eq!(m.coefficient(1, 2), 9 * 25 + 25);
        assert_eq!(m.coefficient(2, 1), m.coefficient(1, 2));
        assert_eq!(m.flops_of_counts(&[3, 4, 6]).unwrap(), count_macs(&g).unwrap());
    }

    #[test]
    fn self_coupling_rejected() {
        let mut g = NetworkGraph::new(InputSpec::image(3, 5, 5));
        g.then("a", conv(4, 3, 1, 1)).unwrap();
        g.then("b", conv(4, 3, 1, 1)).unwrap();
        g.push("skip", LayerKind::Add, &["a", "b"]).unwrap();
        g.then("c", conv(2, 3, 1, 1)).unwrap();
        let g = g.attach_gates(GateInit::default()).unwrap();
        assert!(matches!(derive_coefficients(&g), Err(Error::ShareGroup { .. })));
    }

    #[test]
    fn count_evaluation_edges() {
        let g = zoo::plain_chain(0).attach_gates(GateInit::default()).unwrap();
        let m = derive_coefficients(&g).unwrap();
        assert_eq!(m.flops_of_counts(&[0, 0, 0]).unwrap(), 0);
        assert_eq!(m.flops_of_counts(&[3, 4, 6]).unwrap(), count_macs(&g).unwrap());
        assert!(matches!(m.flops_of_counts(&[3, -1, 6]), Err(Error::NegativeCount(-1))));
        assert!(matches!(m.flops_of_counts(&[3, 4]), Err(Error::Misaligned(_))));
        assert_eq!(m.flops_of_gates(&g.gate_vectors()).unwrap(), count_macs(&g).unwrap());
        // Zeroing the middle group leaves only the last group's linear term.
        assert_eq!(m.flops_of_counts(&[3, 0, 6]).unwrap(), m.linear[2] * 6);
    }

    #[test]
    fn gate_free_graph_is_all_constant() {
        let g = zoo::toy_cnn(3, 8, 10, 0);
        let m = derive_coefficients(&g).unwrap();
        assert_eq!(m.groups(), 0);
        assert_eq!(m.constant, count_macs(&g).unwrap());
    }

    #[test]
    fn csv_dumps() {
        let g = zoo::plain_chain(0).attach_gates(GateInit::default()).unwrap();
        let m = derive_coefficients(&g).unwrap();
        let pairs = m.pairs_csv();
        assert!(pairs.starts_with("group_l,group_k,a_lk\n0,1,324\n"), "{pairs}");
        assert_eq!(m.linear_csv().lines().count(), 4);
    }
}
