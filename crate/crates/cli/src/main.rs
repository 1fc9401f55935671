use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gdp::harness::{self, ProxCadence, SweepAxis, TrainConfig};
use gdp::model_io::load_model;
use gdp::GateMode;

#[derive(Parser)]
#[command(name = "gdp", version, about = "Gate decorator pruning: train, prune, fine-tune, sweep")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a gated network; writes metrics.csv, gates_epochN.csv and model.toml.
    Train(Overrides),
    /// Remove zero-gated channels from a trained model; writes pruned.toml and prune_report.*.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Plain SGD on a pruned model; writes finetuned.toml and finetune_metrics.csv.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train, prune and fine-tune at several lambda or epsilon-decay values.
    Sweep {
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',', conflicts_with = "epsilon_decays")]
        lambdas: Vec<f64>,
        /// Comma-separated epsilon decay values.
        #[arg(long, value_delimiter = ',')]
        epsilon_decays: Vec<f64>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Solve a bilinear l0 prox instance file.
    SolveProx {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, default_value_t = 100)]
        max_sweeps: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Dump the resource-model coefficients and gate summary of a model.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon_init: Option<f64>,
    #[arg(long)]
    epsilon_decay: Option<f64>,
    /// Training epochs (fine-tuning epochs for `finetune`).
    #[arg(long)]
    epochs: Option<usize>,
    /// Base learning rate (fine-tuning rate for `finetune`).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha_lr_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// param | weightnorm | reg
    #[arg(long)]
    mode: Option<GateMode>,
    /// batch | epoch
    #[arg(long)]
    prox_cadence: Option<ProxCadence>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self, finetuning: bool) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.epsilon_init {
            cfg.epsilon_init = v;
        }
        if let Some(v) = self.epsilon_decay {
            cfg.epsilon_decay = v;
        }
        if let Some(v) = self.alpha_lr_scale {
            cfg.alpha_lr_scale = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = self.prox_cadence {
            cfg.prox_cadence = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        match (finetuning, self.epochs, self.lr) {
            (true, e, l) => {
                cfg.finetune.epochs = e.unwrap_or(cfg.finetune.epochs);
                cfg.finetune.lr = l.unwrap_or(cfg.finetune.lr);
            }
            (false, e, l) => {
                cfg.epochs = e.unwrap_or(cfg.epochs);
                cfg.lr = l.unwrap_or(cfg.lr);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load(path: &Path) -> Result<gdp::NetworkGraph> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(o) => {
            let cfg = o.resolve(false)?;
            let split = cfg.data.load()?;
            let out = harness::train(&cfg, &split, Some(&cfg.out))?;
            let last = out.metrics.last().expect("at least one epoch");
            println!(
                "trained {} epochs: val_accuracy {} flops_ratio {} zero_gates {}",
                cfg.epochs, out.val_accuracy, last.flops_ratio, last.zero_gates
            );
        }
        Command::Prune { model, overrides } => {
            let graph = load(&model)?;
            let probe = match &overrides.config {
                Some(_) => overrides.resolve(false)?.data.load()?.val,
                None => harness::random_probes(&graph, 64, overrides.seed.unwrap_or(0)),
            };
            let out = overrides.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let res = harness::prune(&graph, &probe, 250, Some(&out))?;
            print!("{}", res.report.to_text());
        }
        Command::Finetune { model, overrides } => {
            let cfg = overrides.resolve(true)?;
            let graph = load(&model)?;
            let split = cfg.data.load()?;
            let (_, rows) = harness::finetune(&graph, &cfg, &split, Some(&cfg.out))?;
            match rows.last() {
                Some(r) => println!("fine-tuned {} epochs: val_accuracy {}", rows.len(), r.val_accuracy),
                None => println!("fine-tuned 0 epochs"),
            }
        }
        Command::Sweep { lambdas, epsilon_decays, overrides } => {
            let cfg = overrides.resolve(false)?;
            let axis = match (lambdas.is_empty(), epsilon_decays.is_empty()) {
                (false, true) => SweepAxis::Lambda(lambdas),
                (true, false) => SweepAxis::EpsilonDecay(epsilon_decays),
                _ => bail!("give exactly one of --lambdas or --epsilon-decays"),
            };
            let rows = harness::sweep(&cfg, &axis, Some(&cfg.out))?;
            print!("{}", harness::sweep_csv(&rows));
        }
        Command::SolveProx { instance, max_sweeps, out } => {
            let sol = harness::solve_prox_file(&instance, max_sweeps, &out)?;
            println!("objective {} after {} sweeps (converged {})", sol.objective, sol.sweeps, sol.converged);
        }
        Command::Report { model, out } => {
            harness::report(&load(&model)?, &out)?;
            print!("{}", std::fs::read_to_string(out.join("report.txt"))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
