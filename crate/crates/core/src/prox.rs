//! Proximal step on the MAC model and the smoothing schedule.
//!
//! The prox of `lambda * R(alpha)` couples groups through their `l0` counts.
//! It is solved by sweeping over groups in topological order: each group
//! treats the other groups' counts at the previous iterate as constants,
//! which leaves a weighted `l1` problem with a closed-form soft threshold.
//! Every sweep restarts from the prox center; only the counts carry over.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{GateMode, GateVector};
use crate::graph::NetworkGraph;
use crate::resource::ResourceModel;

/// Which terms the step size `eta1 * lambda` multiplies in the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaScope {
    /// `beta_l = eta1 * lambda * (sum_k a_lk c_k + b_l)`.
    #[default]
    Full,
    /// `beta_l = eta1 * lambda * sum_k a_lk c_k + b_l`.
    LinearUnscaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxConfig {
    pub eta1: f64,
    pub lambda: f64,
    pub inner_iters: usize,
    #[serde(default)]
    pub beta_scope: BetaScope,
}

impl ProxConfig {
    pub fn new(eta1: f64, lambda: f64, inner_iters: usize) -> Result<Self> {
        let cfg = Self {
            eta1,
            lambda,
            inner_iters,
            beta_scope: BetaScope::Full,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 > 0.0) || !self.eta1.is_finite() {
            return Err(Error::Config(format!("eta1 must be positive, got {}", self.eta1)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if self.inner_iters == 0 {
            return Err(Error::Config("inner iterations must be at least 1".into()));
        }
        Ok(())
    }

    /// Threshold from the coupling sum `sum_{k != l} a_lk c_k` and `b_l`.
    pub fn beta(&self, coupling: f64, linear: f64) -> f64 {
        let step = self.eta1 * self.lambda;
        match self.beta_scope {
            BetaScope::Full => step * (coupling + linear),
            BetaScope::LinearUnscaled => step * coupling + linear,
        }
    }
}

/// Closed-form minimizer of `0.5 (a - a_hat)^2 + beta |a|`.
pub fn soft_threshold(a_hat: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::NegativeThreshold(beta));
    }
    Ok(shrink(a_hat, beta))
}

#[inline]
fn shrink(a_hat: f64, beta: f64) -> f64 {
    if a_hat >= beta {
        a_hat - beta
    } else if a_hat <= -beta {
        a_hat + beta
    } else {
        0.0
    }
}

/// Dense coefficient view used by the sweep.
struct Coefficients {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Coefficients {
    fn from_model(model: &ResourceModel) -> Self {
        let n = model.groups();
        let mut a = vec![vec![0.0; n]; n];
        for &(l, k, v) in &model.pairs {
            a[l][k] = v as f64;
            a[k][l] = v as f64;
        }
        Self {
            a,
            b: model.linear.iter().map(|&v| v as f64).collect(),
        }
    }

    fn coupling(&self, l: usize, counts: &[usize]) -> f64 {
        self.a[l]
            .iter()
            .zip(counts)
            .enumerate()
            .filter(|&(k, _)| k != l)
            .map(|(_, (a, &c))| a * c as f64)
            .sum()
    }

    fn objective_penalty(&self, counts: &[usize]) -> f64 {
        let n = counts.len();
        let mut r = 0.0;
        for l in 0..n {
            for k in l + 1..n {
                r += self.a[l][k] * (counts[l] * counts[k]) as f64;
            }
            r += self.b[l] * counts[l] as f64;
        }
        r
    }
}

fn l0(v: &[f64]) -> usize {
    v.iter().filter(|&&x| x != 0.0).count()
}

/// Alternating relaxation. `centers[l]` is the prox center of group `l`;
/// `iterate` holds the starting point and receives the result. Returns
/// whether a sweep left the iterate unchanged.
fn alternate(centers: &[Vec<f64>], iterate: &mut [Vec<f64>], coef: &Coefficients, cfg: &ProxConfig, sweeps: usize, mut on_sweep: impl FnMut(&[Vec<f64>])) -> bool {
    let mut stable = false;
    for _ in 0..sweeps {
        // Every group sees the counts of the previous iterate.
        let counts: Vec<usize> = iterate.iter().map(|v| l0(v)).collect();
        let mut changed = false;
        for l in 0..centers.len() {
            let beta = cfg.beta(coef.coupling(l, &counts), coef.b[l]);
            for (x, &c) in iterate[l].iter_mut().zip(&centers[l]) {
                let next = shrink(c, beta);
                if next.to_bits() != x.to_bits() {
                    changed = true;
                }
                *x = next;
            }
        }
        on_sweep(iterate);
        if !changed {
            stable = true;
            break;
        }
    }
    stable
}

/// One prox step on raw gate vectors, in group order.
pub fn prox_step(gates: &mut [GateVector], model: &ResourceModel, cfg: &ProxConfig) -> Result<()> {
    cfg.validate()?;
    if gates.len() != model.groups() {
        return Err(Error::Misaligned(format!(
            "{} gate vectors for {} gate groups",
            gates.len(),
            model.groups()
        )));
    }
    if cfg.lambda == 0.0 {
        return Ok(());
    }
    let coef = Coefficients::from_model(model);
    let centers: Vec<Vec<f64>> = gates.iter().map(|g| g.alpha.clone()).collect();
    let mut iterate = centers.clone();
    alternate(&centers, &mut iterate, &coef, cfg, cfg.inner_iters, |_| {});
    for (g, v) in gates.iter_mut().zip(iterate) {
        if g.forced.is_none() {
            g.alpha = v;
        }
    }
    Ok(())
}

/// Applies the prox step to a graph's gates. In introduced-parameter mode
/// the gate arguments are thresholded; in weight-norm mode each channel's
/// joint consumer-kernel slice is shrunk as a group, so a channel reaches
/// exact zero when its whole slice does. Regularizer-only mode has no prox.
pub fn prox_step_graph(graph: &mut NetworkGraph, model: &ResourceModel, cfg: &ProxConfig) -> Result<()> {
    cfg.validate()?;
    if graph.gates.len() != model.groups() {
        return Err(Error::Misaligned(format!(
            "{} gate groups in graph, {} in model",
            graph.gates.len(),
            model.groups()
        )));
    }
    let Some(mode) = graph.gates.first().map(|g| g.vector.mode) else {
        return Ok(());
    };
    match mode {
        GateMode::IntroducedParam => {
            let mut vectors: Vec<GateVector> = graph.gates.iter().map(|g| g.vector.clone()).collect();
            prox_step(&mut vectors, model, cfg)?;
            for (g, v) in graph.gates.iter_mut().zip(vectors) {
                g.vector = v;
            }
            Ok(())
        }
        GateMode::RegularizerOnly => Ok(()),
        GateMode::WeightNorm => {
            if cfg.lambda == 0.0 {
                return Ok(());
            }
            graph.sync_norm_gates()?;
            let coef = Coefficients::from_model(model);
            let centers: Vec<Vec<f64>> = graph.gates.iter().map(|g| g.vector.alpha.clone()).collect();
            let mut iterate = centers.clone();
            alternate(&centers, &mut iterate, &coef, cfg, cfg.inner_iters, |_| {});
            for (g, target) in iterate.iter().enumerate() {
                let factors: Vec<f64> = centers[g]
                    .iter()
                    .zip(target)
                    .map(|(&n, &t)| if n > 0.0 { t / n } else { 0.0 })
                    .collect();
                for s in graph.gates[g].sites.clone() {
                    scale_input_slices(graph, s, &factors);
                }
                graph.gates[g].vector.alpha = target.clone();
            }
            Ok(())
        }
    }
}

fn scale_input_slices(graph: &mut NetworkGraph, layer: usize, factors: &[f64]) {
    let w = graph.layers[layer].weight.as_mut().expect("gate sites carry weights");
    let (d, c, inner) = match *w.shape() {
        [d, c, kh, kw] => (d, c, kh * kw),
        [d, c] => (d, c, 1),
        _ => unreachable!("gate sites are conv or dense"),
    };
    let data = w.data_mut();
    for o in 0..d {
        for (ch, &f) in factors.iter().enumerate().take(c) {
            for v in &mut data[(o * c + ch) * inner..][..inner] {
                *v = if f == 0.0 { 0.0 } else { *v * f };
            }
        }
    }
}

/// A standalone bilinear-`l0` prox problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub centers: Vec<Vec<f64>>,
    /// Full symmetric coupling matrix; the diagonal must be zero.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub cfg: ProxConfig,
    /// Optional starting point; defaults to the centers.
    pub init: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub sweep: usize,
    pub objective: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<Vec<f64>>,
    pub objective: f64,
    /// Sweeps run, including the final one that confirmed the fixed point.
    pub sweeps: usize,
    pub converged: bool,
    /// Objective after the starting point (sweep 0) and after each sweep.
    pub trace: Vec<TraceRow>,
}

impl Instance {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let n = self.centers.len();
        if self.b.len() != n || self.a.len() != n || self.a.iter().any(|r| r.len() != n) {
            return Err(Error::Misaligned(format!("instance has {n} groups but mismatched coefficients")));
        }
        for l in 0..n {
            if self.a[l][l] != 0.0 {
                return Err(Error::Parse(format!("coupling diagonal a[{l}][{l}] must be zero")));
            }
            if self.b[l] < 0.0 {
                return Err(Error::Parse(format!("b[{l}] must be nonnegative")));
            }
            for k in 0..n {
                if self.a[l][k] < 0.0 || self.a[l][k] != self.a[k][l] {
                    return Err(Error::Parse("coupling matrix must be symmetric and nonnegative".into()));
                }
            }
        }
        if let Some(init) = &self.init {
            if init.len() != n || init.iter().zip(&self.centers).any(|(i, c)| i.len() != c.len()) {
                return Err(Error::Misaligned("initial point does not match the centers".into()));
            }
        }
        Ok(())
    }

    fn coefficients(&self) -> Coefficients {
        Coefficients {
            a: self.a.clone(),
            b: self.b.clone(),
        }
    }

    /// `0.5 ||x - u||^2 + eta1 lambda R(||x||_0)`.
    pub fn objective(&self, x: &[Vec<f64>]) -> f64 {
        let counts: Vec<usize> = x.iter().map(|v| l0(v)).collect();
        let quad: f64 = x
            .iter()
            .zip(&self.centers)
            .flat_map(|(v, c)| v.iter().zip(c).map(|(a, b)| (a - b) * (a - b)))
            .sum();
        0.5 * quad + self.cfg.eta1 * self.cfg.lambda * self.coefficients().objective_penalty(&counts)
    }
}

/// Runs alternating sweeps until one leaves the iterate unchanged or
/// `max_sweeps` is reached.
pub fn solve_bilinear_l0(inst: &Instance, max_sweeps: usize) -> Result<Solution> {
    inst.validate()?;
    let coef = inst.coefficients();
    let mut x = inst.init.clone().unwrap_or_else(|| inst.centers.clone());
    let count = |x: &[Vec<f64>]| x.iter().map(|v| l0(v)).collect::<Vec<_>>();
    let mut trace = vec![TraceRow {
        sweep: 0,
        objective: inst.objective(&x),
        counts: count(&x),
    }];
    let converged = alternate(&inst.centers, &mut x, &coef, &inst.cfg, max_sweeps, |it| {
        trace.push(TraceRow {
            sweep: trace.len(),
            objective: inst.objective(it),
            counts: count(it),
        })
    });
    Ok(Solution {
        objective: inst.objective(&x),
        sweeps: trace.len() - 1,
        converged,
        trace,
        x,
    })
}

/// Which per-entry proximal map the gradient comparator applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxKind {
    L1,
    /// Hard threshold: keep `a_hat` iff `0.5 a_hat^2 > beta`.
    L0,
}

/// Proximal-gradient iteration on `0.5 ||x - u||^2 + lambda R(||x||_0)`
/// with step `eta`. The smooth term moves `x` toward the centers; the
/// prox then thresholds each group with the other groups' previous counts.
/// Used to contrast the `l0` prox with the `l1` relaxation.
pub fn proximal_gradient(inst: &Instance, eta: f64, iters: usize, kind: ProxKind) -> Result<Vec<Vec<f64>>> {
    inst.validate()?;
    let coef = inst.coefficients();
    let mut x = inst.init.clone().unwrap_or_else(|| inst.centers.clone());
    for _ in 0..iters {
        let counts: Vec<usize> = x.iter().map(|v| l0(v)).collect();
        for l in 0..x.len() {
            let beta = eta * inst.cfg.lambda * (coef.coupling(l, &counts) + coef.b[l]);
            for (v, &c) in x[l].iter_mut().zip(&inst.centers[l]) {
                let a_hat = *v - eta * (*v - c);
                *v = match kind {
                    ProxKind::L1 => shrink(a_hat, beta),
                    ProxKind::L0 if 0.5 * a_hat * a_hat > beta => a_hat,
                    ProxKind::L0 => 0.0,
                };
            }
        }
    }
    Ok(x)
}

/// Parses the plain-text instance format:
///
/// ```text
/// groups 2
/// u 0.1 0.2
/// u -0.3 0.5 0.6
/// a 0 1 0.01
/// b 0 0
/// eta1 1
/// lambda 1
/// iters 1
/// init 0.1 0.8
/// init 0.7 0.3 0.8
/// ```
///
/// `a l k v` sets the symmetric entry; unset entries are zero. `b` lists
/// one value per group. `init` lines are optional but, when present, must
/// cover every group. `#` starts a comment.
pub fn parse_instance(text: &str) -> Result<Instance> {
    let mut groups: Option<usize> = None;
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut init: Vec<Vec<f64>> = Vec::new();
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut b: Option<Vec<f64>> = None;
    let (mut eta1, mut lambda, mut iters) = (1.0, 1.0, 1usize);
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse(format!("line {}: {msg}: {raw:?}", no + 1));
        let mut parts = line.split_whitespace();
        let key = parts.next().expect("nonempty line");
        let nums = |parts: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>> {
            parts.map(|p| p.parse::<f64>().map_err(|_| bad("not a number"))).collect()
        };
        match key {
            "groups" => groups = Some(parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad("bad group count"))?),
            "u" => centers.push(nums(parts)?),
            "init" => init.push(nums(parts)?),
            "b" => b = Some(nums(parts)?),
            "a" => {
                let v = nums(parts)?;
                let [l, k, val] = v[..] else { return Err(bad("expected `a l k value`")) };
                if l.fract() != 0.0 || k.fract() != 0.0 || l < 0.0 || k < 0.0 {
                    return Err(bad("group indices must be nonnegative integers"));
                }
                entries.push((l as usize, k as usize, val));
            }
            "eta1" | "lambda" | "iters" => {
                let v = nums(parts)?;
                let [v] = v[..] else { return Err(bad("expected one value")) };
                match key {
                    "eta1" => eta1 = v,
                    "lambda" => lambda = v,
                    _ => {
                        if v < 1.0 || v.fract() != 0.0 {
                            return Err(bad("iters must be a positive integer"));
                        }
                        iters = v as usize;
                    }
                }
            }
            _ => return Err(bad("unknown key")),
        }
    }
    let n = groups.unwrap_or(centers.len());
    if centers.len() != n || n == 0 {
        return Err(Error::Parse(format!("expected {n} `u` lines, found {}", centers.len())));
    }
    let mut a = vec![vec![0.0; n]; n];
    for (l, k, v) in entries {
        if l >= n || k >= n {
            return Err(Error::Parse(format!("coupling index ({l}, {k}) out of range")));
        }
        a[l][k] = v;
        a[k][l] = v;
    }
    let inst = Instance {
        b: b.unwrap_or_else(|| vec![0.0; n]),
        a,
        centers,
        cfg: ProxConfig::new(eta1, lambda, iters)?,
        init: if init.is_empty() { None } else { Some(init) },
    };
    inst.validate()?;
    Ok(inst)
}

/// Geometric smoothing schedule, stepped once per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub init: f64,
    pub decay: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { init: 0.1, decay: 0.96 }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.init > 0.0) {
            return Err(Error::NonPositiveEpsilon(self.init));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("epsilon decay must be in (0, 1], got {}", self.decay)));
        }
        Ok(())
    }

    /// Value after `epochs` completed epochs.
    pub fn at(&self, epochs: usize) -> f64 {
        let mut e = self.init;
        for _ in 0..epochs {
            e *= self.decay;
        }
        e
    }
}

/// Applies one epoch-boundary decay to every gate vector.
pub fn epsilon_step(schedule: &EpsilonSchedule, gates: &mut [GateVector]) {
    for g in gates {
        g.decay_epsilon(schedule.decay);
    }
}
