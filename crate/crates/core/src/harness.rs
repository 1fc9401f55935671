//! Training, pruning, fine-tuning and sweep runs, driven by a TOML config.
//!
//! Every command writes plain CSV or text files into its output directory;
//! floats are printed in shortest round-trip form so reruns with the same
//! seed produce byte-identical files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{evaluate, DataSpec, Dataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gate::GateMode;
use crate::graph::{GateInit, NetworkGraph};
use crate::model_io::{from_toml, load_model, save_model};
use crate::optim::{Penalty, Sgd, SgdConfig};
use crate::prox::{self, parse_instance, solve_bilinear_l0, BetaScope, EpsilonSchedule, ProxConfig};
use crate::prune::{absorb_and_remove, consistency_check, PruneReport};
use crate::resource::{count_macs, derive_coefficients, ResourceModel};
use crate::zoo;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProxCadence {
    #[default]
    Batch,
    Epoch,
}

impl std::str::FromStr for ProxCadence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(ProxCadence::Batch),
            "epoch" => Ok(ProxCadence::Epoch),
            other => Err(Error::Config(format!("unknown prox cadence {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Start {
    /// Fresh He-normal parameters from the run seed.
    #[default]
    Scratch,
    /// Parameters from the model file's weights sidecar.
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
    /// Half-cosine to zero over the run. The prox threshold scales with the
    /// rate, so gates near the threshold freeze as the rate vanishes.
    Cosine,
}

impl LrSchedule {
    pub fn at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, gamma } => base * gamma.powi((epoch / every.max(1)) as i32),
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.01, schedule: LrSchedule::Cosine }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// A built-in topology name or a model file path.
    pub model: String,
    pub data: DataSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr_scale: f64,
    pub lambda: f64,
    /// Divide the resource model by the full network's MACs, so `lambda`
    /// trades loss against the FLOPs ratio rather than raw MACs.
    pub normalize_resource: bool,
    pub alpha_init: f64,
    pub epsilon_init: f64,
    pub epsilon_decay: f64,
    pub seed: u64,
    pub prox_cadence: ProxCadence,
    pub prox_inner_iters: usize,
    pub beta_scope: BetaScope,
    pub mode: GateMode,
    pub start: Start,
    /// Re-estimate batch-norm statistics on the training set before each
    /// validation pass.
    pub recompute_bn: bool,
    pub histogram_bins: usize,
    pub eval_batch: usize,
    pub finetune: FinetuneConfig,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: "toy-cnn".into(),
            data: DataSpec::Synthetic(SyntheticSpec::default()),
            epochs: 60,
            batch_size: 32,
            lr: 0.05,
            schedule: LrSchedule::Constant,
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha_lr_scale: 0.1,
            lambda: 0.0,
            normalize_resource: true,
            alpha_init: 1.0,
            epsilon_init: 0.1,
            epsilon_decay: 0.96,
            seed: 0,
            prox_cadence: ProxCadence::Batch,
            prox_inner_iters: 10,
            beta_scope: BetaScope::Full,
            mode: GateMode::IntroducedParam,
            start: Start::Scratch,
            recompute_bn: false,
            histogram_bins: 20,
            eval_batch: 250,
            finetune: FinetuneConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl TrainConfig {
    /// Parses a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: TrainConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.rebase(base);
        if zoo::builtin(&cfg.model, 0).is_none() && Path::new(&cfg.model).is_relative() {
            cfg.model = base.join(&cfg.model).display().to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.eval_batch == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.alpha_lr_scale >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("alpha_lr_scale, momentum and weight_decay must be nonnegative".into());
        }
        if self.prox_inner_iters == 0 || self.histogram_bins == 0 {
            return bad("prox_inner_iters and histogram_bins must be at least 1".into());
        }
        if let LrSchedule::Step { every: 0, .. } = self.schedule {
            return bad("step schedule needs every >= 1".into());
        }
        if !(self.finetune.lr > 0.0) {
            return bad(format!("finetune lr must be positive, got {}", self.finetune.lr));
        }
        self.epsilon_schedule().validate()
    }

    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        EpsilonSchedule { init: self.epsilon_init, decay: self.epsilon_decay }
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig { momentum: self.momentum, weight_decay: self.weight_decay, alpha_lr_scale: self.alpha_lr_scale }
    }

    /// Builds the starting network (without gates) for the given data.
    pub fn build_model(&self, split: &Split) -> Result<NetworkGraph> {
        let shape = &split.train.sample_shape;
        let graph = match self.model.as_str() {
            "toy-cnn" if shape.len() == 3 && shape[1] == shape[2] => {
                zoo::toy_cnn(shape[0], shape[1], split.train.classes, self.seed)
            }
            name => match zoo::builtin(name, self.seed) {
                Some(g) => g,
                None => {
                    let path = Path::new(name);
                    match self.start {
                        Start::Pretrained => load_model(path)?,
                        Start::Scratch => {
                            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                            let (mut g, _) = from_toml(&text, path)?;
                            g.gates.clear();
                            zoo::init_params(&mut g, self.seed);
                            g
                        }
                    }
                }
            },
        };
        if graph.input.shape != *shape {
            return Err(Error::Config(format!(
                "model input {:?} does not match data samples {shape:?}",
                graph.input.shape
            )));
        }
        Ok(graph)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub flops_ratio: f64,
    pub zero_gates: usize,
    pub epsilon: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,flops_ratio,zero_gates,epsilon";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.flops_ratio, r.zero_gates, r.epsilon)
            .expect("writing to a String");
    }
    s
}

/// Remaining MACs at the current gate supports, relative to the full model.
pub fn flops_ratio(model: &ResourceModel, graph: &NetworkGraph) -> Result<f64> {
    let full: Vec<i64> = graph.gates.iter().map(|g| g.vector.len() as i64).collect();
    let full = model.flops_of_counts(&full)?;
    if full == 0 {
        return Ok(1.0);
    }
    Ok(model.flops_of_gates(&graph.gate_vectors())? as f64 / full as f64)
}

/// Histogram of `g_eps(alpha)` over all gates, with exact zeros counted
/// in their own row.
pub fn gate_histogram(graph: &NetworkGraph, bins: usize) -> String {
    let mut counts = vec![0usize; bins];
    let mut zeros = 0;
    for g in &graph.gates {
        let v = &g.vector;
        let values = if v.forced.is_some() { v.values() } else { v.smooth_values() };
        for (i, x) in values.into_iter().enumerate() {
            if v.is_zero(i) {
                zeros += 1;
            } else {
                counts[((x * bins as f64) as usize).min(bins - 1)] += 1;
            }
        }
    }
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (b, c) in counts.iter().enumerate() {
        writeln!(s, "{},{},{c}", b as f64 / bins as f64, (b + 1) as f64 / bins as f64).expect("writing to a String");
    }
    writeln!(s, "exact_zero,,{zeros}").expect("writing to a String");
    s
}

fn mean_epsilon(graph: &NetworkGraph) -> f64 {
    let all: Vec<f64> = graph.gates.iter().flat_map(|g| (0..g.vector.len()).map(|i| g.vector.epsilon.at(i))).collect();
    if all.is_empty() {
        0.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    }
}

/// Copy of `graph` whose batch-norm running statistics are the averages of
/// training-mode batch statistics over `data`.
pub fn recalibrate_bn(graph: &NetworkGraph, data: &Dataset, batch: usize) -> Result<NetworkGraph> {
    let mut out = graph.clone();
    let mut sums: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; graph.layers.len()];
    let batches = data.batches(batch);
    for idx in &batches {
        let (x, _) = data.gather(idx);
        let mut tape = Tape::new();
        let fwd = graph.forward_tape(&mut tape, &x, true)?;
        for (i, stats) in fwd.bn_stats {
            let (m, v) = sums[i].get_or_insert_with(|| (vec![0.0; stats.mean.len()], vec![0.0; stats.var.len()]));
            m.iter_mut().zip(&stats.mean).for_each(|(a, b)| *a += b);
            v.iter_mut().zip(&stats.var).for_each(|(a, b)| *a += b);
        }
    }
    let n = batches.len().max(1) as f64;
    for (layer, sum) in out.layers.iter_mut().zip(sums) {
        if let Some((m, v)) = sum {
            layer.running_mean = Some(m.into_iter().map(|x| x / n).collect());
            layer.running_var = Some(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub graph: NetworkGraph,
    pub metrics: Vec<MetricsRow>,
    pub val_accuracy: f64,
}

/// The gated training loop: SGD step, prox step at the configured cadence,
/// then one epsilon decay per epoch.
pub fn train(cfg: &TrainConfig, split: &Split, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be at least 1".into()));
    }
    let mut graph = cfg.build_model(split)?;
    if graph.gates.is_empty() {
        graph = graph.attach_gates(GateInit { alpha: cfg.alpha_init, epsilon: cfg.epsilon_init, mode: cfg.mode })?;
    }
    let model = derive_coefficients(&graph)?;
    let lambda = if cfg.normalize_resource {
        let full = count_macs(&graph)?;
        if full == 0 { cfg.lambda } else { cfg.lambda / full as f64 }
    } else {
        cfg.lambda
    };
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let schedule = cfg.epsilon_schedule();
    let hist_every = (cfg.epochs / 20).max(1);
    let mut sgd = Sgd::new(cfg.sgd());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let reg_only = graph.gates.first().is_some_and(|g| g.vector.mode == GateMode::RegularizerOnly);

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.at(cfg.lr, epoch, cfg.epochs);
        // Gate arguments move with the alpha step; weight-norm gates are the weights themselves.
        let eta = if cfg.mode == GateMode::WeightNorm { lr } else { lr * cfg.alpha_lr_scale };
        let batches = split.train.shuffled_batches(cfg.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        for idx in &batches {
            let (x, y) = split.train.gather(idx);
            let penalty = reg_only.then_some(Penalty { model: &model, lambda });
            loss_sum += sgd.loss_step(&mut graph, &x, &y, lr, penalty)? * idx.len() as f64;
            if cfg.prox_cadence == ProxCadence::Batch && lambda > 0.0 && eta > 0.0 {
                let pc = ProxConfig { eta1: eta, lambda, inner_iters: cfg.prox_inner_iters, beta_scope: cfg.beta_scope };
                prox::prox_step_graph(&mut graph, &model, &pc)?;
            }
        }
        if cfg.prox_cadence == ProxCadence::Epoch && lambda > 0.0 && eta > 0.0 {
            let eta = eta * batches.len() as f64;
            let pc = ProxConfig { eta1: eta, lambda, inner_iters: cfg.prox_inner_iters, beta_scope: cfg.beta_scope };
            prox::prox_step_graph(&mut graph, &model, &pc)?;
        }
        let mut vectors: Vec<_> = graph.gates.iter().map(|g| g.vector.clone()).collect();
        prox::epsilon_step(&schedule, &mut vectors);
        for (g, v) in graph.gates.iter_mut().zip(vectors) {
            g.vector = v;
        }

        let eval_graph = if cfg.recompute_bn { recalibrate_bn(&graph, &split.train, cfg.eval_batch)? } else { graph.clone() };
        let val = evaluate(&eval_graph, &split.val, cfg.eval_batch)?;
        metrics.push(MetricsRow {
            epoch: epoch + 1,
            train_loss: loss_sum / split.train.len().max(1) as f64,
            val_loss: val.loss,
            flops_ratio: flops_ratio(&model, &graph)?,
            zero_gates: graph.zero_gates(),
            epsilon: mean_epsilon(&graph),
        });
        if let Some(dir) = out {
            if (epoch + 1) % hist_every == 0 || epoch + 1 == cfg.epochs {
                write(&dir.join(format!("gates_epoch{}.csv", epoch + 1)), &gate_histogram(&graph, cfg.histogram_bins))?;
            }
            write(&dir.join("metrics.csv"), &metrics_csv(&metrics))?;
        }
    }
    let val_accuracy = evaluate(&graph, &split.val, cfg.eval_batch)?.accuracy;
    if let Some(dir) = out {
        save_model(&graph, &dir.join("model.toml"))?;
    }
    Ok(TrainOutcome { graph, metrics, val_accuracy })
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub pruned: NetworkGraph,
    pub report: PruneReport,
}

/// Prunes and checks the result on `probe` (inference mode).
pub fn prune(graph: &NetworkGraph, probe: &Dataset, batch: usize, out: Option<&Path>) -> Result<PruneOutcome> {
    let (pruned, mut report) = absorb_and_remove(graph)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for idx in probe.batches(batch) {
        let (x, y) = probe.gather(&idx);
        xs.push(x);
        ys.push(y);
    }
    let (dev, acc) = consistency_check(graph, &pruned, &xs, Some(&ys))?;
    report.max_deviation = Some(dev);
    report.accuracy = acc;
    if let Some(dir) = out {
        create_dir(dir)?;
        save_model(&pruned, &dir.join("pruned.toml"))?;
        write(&dir.join("prune_report.txt"), &report.to_text())?;
        write(&dir.join("prune_report.csv"), &report.to_csv())?;
    }
    Ok(PruneOutcome { pruned, report })
}

/// Random probe inputs for pruning without a dataset.
pub fn random_probes(graph: &NetworkGraph, n: usize, seed: u64) -> Dataset {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = graph.input.shape.iter().product();
    let inputs = (0..n * per).map(|_| rng.random_range(-1.0..1.0)).collect();
    Dataset { inputs, sample_shape: graph.input.shape.clone(), labels: vec![0; n], classes: 1 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

pub fn finetune_csv(rows: &[FinetuneRow]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_accuracy).expect("writing to a String");
    }
    s
}

/// Plain SGD on a pruned (gate-free) network.
pub fn finetune(graph: &NetworkGraph, cfg: &TrainConfig, split: &Split, out: Option<&Path>) -> Result<(NetworkGraph, Vec<FinetuneRow>)> {
    cfg.validate()?;
    if !graph.gates.is_empty() {
        return Err(Error::Config("fine-tuning expects a pruned model without gates".into()));
    }
    let mut graph = graph.clone();
    let mut sgd = Sgd::new(cfg.sgd());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let ft = cfg.finetune;
    let mut rows = Vec::with_capacity(ft.epochs);
    for epoch in 0..ft.epochs {
        let lr = ft.schedule.at(ft.lr, epoch, ft.epochs);
        let mut loss_sum = 0.0;
        for idx in split.train.shuffled_batches(cfg.batch_size, &mut rng) {
            let (x, y) = split.train.gather(&idx);
            loss_sum += sgd.loss_step(&mut graph, &x, &y, lr, None)? * idx.len() as f64;
        }
        let val = evaluate(&graph, &split.val, cfg.eval_batch)?;
        rows.push(FinetuneRow {
            epoch: epoch + 1,
            train_loss: loss_sum / split.train.len().max(1) as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
        });
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        save_model(&graph, &dir.join("finetuned.toml"))?;
        write(&dir.join("finetune_metrics.csv"), &finetune_csv(&rows))?;
    }
    Ok((graph, rows))
}

/// What a sweep varies.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    Lambda(Vec<f64>),
    EpsilonDecay(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub epsilon_decay: f64,
    pub flops_ratio: f64,
    pub super_acc: f64,
    pub pruned_acc: f64,
    pub finetuned_acc: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,epsilon_decay,flops_ratio,super_acc,pruned_acc,finetuned_acc\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{},{}", r.lambda, r.epsilon_decay, r.flops_ratio, r.super_acc, r.pruned_acc, r.finetuned_acc)
            .expect("writing to a String");
    }
    s
}

/// Train, prune and fine-tune once per sweep point, in parallel. Point `i`
/// writes into `out/point{i}`.
pub fn sweep(base: &TrainConfig, axis: &SweepAxis, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    let configs: Vec<TrainConfig> = match axis {
        SweepAxis::Lambda(v) => v.iter().map(|&l| TrainConfig { lambda: l, ..base.clone() }).collect(),
        SweepAxis::EpsilonDecay(v) => v.iter().map(|&d| TrainConfig { epsilon_decay: d, ..base.clone() }).collect(),
    };
    if configs.len() < 2 {
        return Err(Error::Config(format!("a sweep needs at least 2 points, got {}", configs.len())));
    }
    for c in &configs {
        c.validate()?;
    }
    let split = base.data.load()?;
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let rows = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let dir = out.map(|d| d.join(format!("point{i}")));
            let dir = dir.as_deref();
            let trained = train(cfg, &split, dir)?;
            let model = derive_coefficients(&trained.graph)?;
            let pruned = prune(&trained.graph, &split.val, cfg.eval_batch, dir)?;
            let (super_acc, pruned_acc) = pruned.report.accuracy.expect("labelled probes");
            let (tuned, _) = finetune(&pruned.pruned, cfg, &split, dir)?;
            Ok(SweepRow {
                lambda: cfg.lambda,
                epsilon_decay: cfg.epsilon_decay,
                flops_ratio: flops_ratio(&model, &trained.graph)?,
                super_acc,
                pruned_acc,
                finetuned_acc: evaluate(&tuned, &split.val, cfg.eval_batch)?.accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        write(&dir.join("summary.csv"), &sweep_csv(&rows))?;
    }
    Ok(rows)
}

/// Solves a bilinear prox instance file; writes `solution.csv` (group,
/// index, value) and `trace.csv` (sweep, objective, per-group counts).
pub fn solve_prox_file(instance: &Path, max_sweeps: usize, out: &Path) -> Result<prox::Solution> {
    let text = std::fs::read_to_string(instance).map_err(|e| Error::io(instance, e))?;
    let inst = parse_instance(&text)?;
    let sol = solve_bilinear_l0(&inst, max_sweeps)?;
    create_dir(out)?;
    let mut s = String::from("group,index,value\n");
    for (g, xs) in sol.x.iter().enumerate() {
        for (i, v) in xs.iter().enumerate() {
            writeln!(s, "{g},{i},{v}").expect("writing to a String");
        }
    }
    write(&out.join("solution.csv"), &s)?;
    let mut t = String::from("sweep,objective,counts\n");
    for row in &sol.trace {
        let counts: Vec<String> = row.counts.iter().map(usize::to_string).collect();
        writeln!(t, "{},{},{}", row.sweep, row.objective, counts.join(";")).expect("writing to a String");
    }
    write(&out.join("trace.csv"), &t)?;
    write(
        &out.join("summary.txt"),
        &format!("objective {}\nsweeps {}\nconverged {}\n", sol.objective, sol.sweeps, sol.converged),
    )?;
    Ok(sol)
}

/// Resource-model coefficients and gate summary of a model file.
pub fn report(graph: &NetworkGraph, out: &Path) -> Result<()> {
    let model = derive_coefficients(graph)?;
    create_dir(out)?;
    write(&out.join("a.csv"), &model.pairs_csv())?;
    write(&out.join("b.csv"), &model.linear_csv())?;
    let mut s = String::new();
    writeln!(s, "layers {}", graph.layers.len()).expect("writing to a String");
    writeln!(s, "params {}", graph.param_count()).expect("writing to a String");
    writeln!(s, "macs {}", count_macs(graph)?).expect("writing to a String");
    writeln!(s, "constant_macs {}", model.constant).expect("writing to a String");
    writeln!(s, "gate_groups {}", graph.gates.len()).expect("writing to a String");
    writeln!(s, "gates {}", graph.total_gates()).expect("writing to a String");
    writeln!(s, "zero_gates {}", graph.zero_gates()).expect("writing to a String");
    if !graph.gates.is_empty() {
        writeln!(s, "flops_ratio {}", flops_ratio(&model, graph)?).expect("writing to a String");
    }
    write(&out.join("report.txt"), &s)
}
