//! Model files: a TOML topology document plus a binary weights sidecar.
//!
//! The sidecar is `GDPW`, a little-endian `u32` version, a `u64` tensor
//! count, one `u64` length per tensor, then the values as little-endian
//! `f64`. Tensors appear in layer order; within a layer the order is kernel
//! (or scale), bias (or shift), running mean, running variance, skipping
//! whatever the layer lacks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{Epsilon, GateMode, GateVector};
use crate::graph::{GateGroup, InputSpec, LayerKind, NetworkGraph};

const MAGIC: &[u8; 4] = b"GDPW";
const VERSION: u32 = 1;
const FORMAT: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format: u32,
    /// Sidecar path relative to the document. Absent for topology-only files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    share: Vec<Vec<String>>,
    input: InputSpec,
    layer: Vec<toml::Table>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    gate: Vec<GateDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateDoc {
    sites: Vec<String>,
    mode: GateMode,
    epsilon: Epsilon,
    alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    forced: Option<f64>,
}

fn parse_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{}: {msg}", path.display()))
}

/// Topology and gate state as a TOML document.
pub fn to_toml(graph: &NetworkGraph, weights: Option<PathBuf>) -> Result<String> {
    let mut layers = Vec::with_capacity(graph.layers.len());
    for (i, l) in graph.layers.iter().enumerate() {
        let mut t = toml::Table::new();
        t.insert("name".into(), l.name.clone().into());
        let kind = toml::Table::try_from(&l.kind).map_err(|e| Error::Parse(e.to_string()))?;
        t.extend(kind);
        let reads_previous = l.inputs.len() == 1 && l.inputs[0] == i;
        if !reads_previous {
            let names: Vec<toml::Value> = l.inputs.iter().map(|&n| graph.node_name(n).to_string().into()).collect();
            t.insert("inputs".into(), names.into());
        }
        if !l.gated {
            t.insert("gated".into(), false.into());
        }
        layers.push(t);
    }
    let doc = ModelDoc {
        format: FORMAT,
        weights,
        share: graph.share.clone(),
        input: graph.input.clone(),
        layer: layers,
        gate: graph
            .gates
            .iter()
            .map(|g| GateDoc {
                sites: g.sites.iter().map(|&s| graph.layers[s].name.clone()).collect(),
                mode: g.vector.mode,
                epsilon: g.vector.epsilon.clone(),
                alpha: g.vector.alpha.clone(),
                forced: g.vector.forced,
            })
            .collect(),
    };
    toml::to_string(&doc).map_err(|e| Error::Parse(e.to_string()))
}

/// Builds the graph described by a TOML document, with zeroed parameters.
/// Returns the graph and the sidecar path, if any.
pub fn from_toml(text: &str, origin: &Path) -> Result<(NetworkGraph, Option<PathBuf>)> {
    let doc: ModelDoc = toml::from_str(text).map_err(|e| parse_err(origin, e))?;
    if doc.format != FORMAT {
        return Err(parse_err(origin, format!("unsupported format {}", doc.format)));
    }
    let mut g = NetworkGraph::new(doc.input);
    for mut t in doc.layer {
        let name = match t.remove("name") {
            Some(toml::Value::String(s)) => s,
            _ => return Err(parse_err(origin, "every layer needs a string name")),
        };
        let inputs: Option<Vec<String>> = match t.remove("inputs") {
            None => None,
            Some(v) => Some(v.try_into().map_err(|e| parse_err(origin, format!("layer {name:?} inputs: {e}")))?),
        };
        let gated = match t.remove("gated") {
            None => true,
            Some(toml::Value::Boolean(b)) => b,
            Some(_) => return Err(parse_err(origin, format!("layer {name:?}: gated must be a boolean"))),
        };
        let kind: LayerKind = t.try_into().map_err(|e| parse_err(origin, format!("layer {name:?}: {e}")))?;
        let node = match inputs {
            Some(names) => {
                let names: Vec<&str> = names.iter().map(String::as_str).collect();
                g.push(&name, kind, &names)?
            }
            None if matches!(kind, LayerKind::Constant { .. }) => g.push(&name, kind, &[])?,
            None => g.then(&name, kind)?,
        };
        g.layers[node - 1].gated = gated;
    }
    g.share = doc.share;
    let mut gates = Vec::with_capacity(doc.gate.len());
    for gd in doc.gate {
        let sites = gd
            .sites
            .iter()
            .map(|s| g.layer_index(s).ok_or_else(|| parse_err(origin, format!("gate site {s:?} is not a layer"))))
            .collect::<Result<Vec<_>>>()?;
        let mut vector = GateVector::new(gd.alpha, gd.epsilon, gd.mode)?;
        vector.forced = gd.forced;
        gates.push(GateGroup { sites, vector });
    }
    g.gates = gates;
    g.validate_gates()?;
    Ok((g, doc.weights))
}

fn tensors_mut(graph: &mut NetworkGraph) -> Vec<&mut [f64]> {
    let mut out = Vec::new();
    for l in &mut graph.layers {
        if let Some(w) = &mut l.weight {
            out.push(w.data_mut());
        }
        if let Some(b) = &mut l.bias {
            out.push(b.data_mut());
        }
        if let Some(m) = &mut l.running_mean {
            out.push(m.as_mut_slice());
        }
        if let Some(v) = &mut l.running_var {
            out.push(v.as_mut_slice());
        }
    }
    out
}

fn tensors(graph: &NetworkGraph) -> Vec<&[f64]> {
    let mut out = Vec::new();
    for l in &graph.layers {
        out.extend(l.weight.as_ref().map(|w| w.data()));
        out.extend(l.bias.as_ref().map(|b| b.data()));
        out.extend(l.running_mean.as_deref());
        out.extend(l.running_var.as_deref());
    }
    out
}

pub fn encode_weights(graph: &NetworkGraph) -> Vec<u8> {
    let ts = tensors(graph);
    let total: usize = ts.iter().map(|t| t.len()).sum();
    let mut out = Vec::with_capacity(16 + 8 * ts.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ts.len() as u64).to_le_bytes());
    for t in &ts {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
    }
    for t in &ts {
        for v in *t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Fills the graph's parameters from a sidecar; every count must match.
pub fn decode_weights(graph: &mut NetworkGraph, bytes: &[u8], origin: &Path) -> Result<()> {
    let bad = |msg: String| parse_err(origin, msg);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated weights file".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("not a weights file".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("four bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported weights version {version}")));
    }
    let count = u64::from_le_bytes(take(8)?.try_into().expect("eight bytes")) as usize;
    let mut slots = tensors_mut(graph);
    if count != slots.len() {
        return Err(bad(format!("{count} tensors stored, topology has {}", slots.len())));
    }
    let mut lens = Vec::with_capacity(count);
    for (i, slot) in slots.iter().enumerate() {
        let n = u64::from_le_bytes(take(8)?.try_into().expect("eight bytes")) as usize;
        if n != slot.len() {
            return Err(bad(format!("tensor {i} has {n} values, topology expects {}", slot.len())));
        }
        lens.push(n);
    }
    let total: usize = lens.iter().sum();
    let values: Vec<f64> = take(8 * total)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes after the last tensor".into()));
    }
    let mut rest = values.as_slice();
    for slot in &mut slots {
        let (head, tail) = rest.split_at(slot.len());
        slot.copy_from_slice(head);
        rest = tail;
    }
    Ok(())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `path` and its `.weights` sidecar.
pub fn save_model(graph: &NetworkGraph, path: &Path) -> Result<()> {
    let sidecar = path.with_extension("weights");
    let rel = PathBuf::from(sidecar.file_name().expect("model path has a file name"));
    write(path, to_toml(graph, Some(rel))?.as_bytes())?;
    write(&sidecar, &encode_weights(graph))
}

/// Reads a model document and, when it names one, its weights sidecar.
pub fn load_model(path: &Path) -> Result<NetworkGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (mut g, weights) = from_toml(&text, path)?;
    if let Some(w) = weights {
        let w = path.parent().unwrap_or(Path::new(".")).join(w);
        let bytes = std::fs::read(&w).map_err(|e| Error::io(&w, e))?;
        decode_weights(&mut g, &bytes, &w)?;
    }
    Ok(g)
}
