use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use paw_core::runner::{self, CurveModel, ExperimentConfig, SynthSection, TaskKind};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(
    name = "paw",
    version,
    about = "Privacy-aware model design experiments"
)]
struct Cli {
    /// Experiment config (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory for reports and artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task named in --config.
    Run,
    /// Train one model, optionally with DP-SGD.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Correlation-based or privacy-aware feature selection.
    Fselect {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// cfs_greedy, cfs_ga or pafs.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        dp_entropy_eps: Option<f64>,
    },
    /// Architecture search.
    Asearch {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Standard vs privacy-aware workflow.
    Compare {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Crossover epsilon of two curve CSVs (columns epsilon,metric).
    Crossover {
        #[arg(long)]
        simple: Option<PathBuf>,
        #[arg(long)]
        complex: Option<PathBuf>,
    },
    /// Closed-form and Monte Carlo errors of full vs reduced linear models.
    Lemma {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
        #[arg(long, allow_hyphen_values = true)]
        y: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        sigma_prime: Option<f64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// DP-SGD privacy accounting.
    Accountant {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        noise_multiplier: Option<f64>,
        #[arg(long)]
        target_epsilon: Option<f64>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Write a synthetic-sum dataset and its manifest.
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        base_dim: Option<usize>,
        #[arg(long)]
        expansion: Option<usize>,
    },
    /// Fit epsilon = ln(alpha + beta / n) to a CSV with columns n,epsilon.
    Fitcurve {
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// DP accuracy-vs-epsilon curves for several models.
    Curve {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        /// Model as name=units-units, e.g. simple=8 or complex=256-256. Repeatable.
        #[arg(long = "curve-model")]
        models: Vec<String>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Synthetic-sum rows; selects synthetic data.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    base_dim: Option<usize>,
    #[arg(long)]
    expansion: Option<usize>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    activation: Option<String>,
    /// softmax or sigmoid.
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    rwt_last: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dp: bool,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    noise_multiplier: Option<f64>,
    #[arg(long)]
    target_epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    save_model: bool,
}

#[derive(Args)]
struct SearchArgs {
    /// paas, rs or mgrs.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    space: Option<PathBuf>,
    #[arg(long)]
    eps_prime: Option<f64>,
    #[arg(long)]
    pop_k: Option<usize>,
    #[arg(long)]
    gens_l: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    gen_sizes: Option<Vec<usize>>,
    #[arg(long)]
    p_mutate: Option<f64>,
}

/// Parses a lowercase enum name through its serde representation.
fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> anyhow::Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .with_context(|| format!("invalid {what} '{s}'"))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(self, cfg: &mut ExperimentConfig) {
        if let Some(m) = self.manifest {
            cfg.data.manifest = Some(m);
            cfg.data.synth = None;
        }
        if self.n.is_some() || self.base_dim.is_some() || self.expansion.is_some() {
            let s = cfg.data.synth.get_or_insert_with(SynthSection::default);
            set(&mut s.n, self.n);
            set(&mut s.base_dim, self.base_dim);
            set(&mut s.expansion, self.expansion);
            cfg.data.manifest = None;
        }
    }
}

impl ModelArgs {
    fn apply(self, cfg: &mut ExperimentConfig) -> anyhow::Result<()> {
        set(&mut cfg.model.hidden, self.hidden);
        if let Some(a) = self.activation {
            cfg.model.activation = parse_enum("activation", &a)?;
        }
        if let Some(o) = self.output {
            cfg.model.output = parse_enum("output", &o)?;
        }
        if self.rwt_last.is_some() {
            cfg.model.rwt_last = self.rwt_last;
        }
        Ok(())
    }
}

impl TrainArgs {
    fn apply(self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        set(&mut t.learning_rate, self.lr);
        set(&mut t.batch, self.batch);
        set(&mut t.epochs, self.epochs);
        set(&mut t.clip_l2, self.clip);
        set(&mut t.delta, self.delta);
        if self.noise_multiplier.is_some() {
            t.noise_multiplier = self.noise_multiplier;
            t.target_epsilon = None;
        }
        if self.target_epsilon.is_some() {
            t.target_epsilon = self.target_epsilon;
            t.noise_multiplier = None;
        }
        t.dp |= self.dp;
        t.save_model |= self.save_model;
    }
}

impl SearchArgs {
    fn apply(self, cfg: &mut ExperimentConfig) -> anyhow::Result<()> {
        let a = &mut cfg.asearch;
        if let Some(m) = self.method {
            a.method = parse_enum("search method", &m)?;
        }
        if self.space.is_some() {
            a.space = self.space;
        }
        set(&mut a.eps_prime, self.eps_prime);
        set(&mut a.pop_k, self.pop_k);
        set(&mut a.gens_l, self.gens_l);
        set(&mut a.k, self.k);
        set(&mut a.gen_sizes, self.gen_sizes);
        set(&mut a.p_mutate, self.p_mutate);
        Ok(())
    }
}

fn parse_curve_model(s: &str) -> anyhow::Result<CurveModel> {
    let (name, units) = s
        .split_once('=')
        .context("curve model must look like name=units-units")?;
    let hidden = units
        .split('-')
        .filter(|u| !u.is_empty())
        .map(|u| {
            u.parse::<usize>()
                .with_context(|| format!("bad unit count '{u}'"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(CurveModel {
        name: name.to_string(),
        hidden,
    })
}

/// Builds the effective config: file (or defaults), then subcommand and global flags.
fn build_config(cli: Cli) -> anyhow::Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => Some(ExperimentConfig::read(p)?),
        None => None,
    };
    let start = |task: TaskKind| {
        let mut cfg = base.clone().unwrap_or_else(|| ExperimentConfig::new(task));
        cfg.task = task;
        cfg
    };
    let mut cfg = match cli.command {
        Command::Run => base.clone().context("run needs --config")?,
        Command::Train { data, model, train } => {
            let mut cfg = start(TaskKind::Train);
            data.apply(&mut cfg);
            model.apply(&mut cfg)?;
            train.apply(&mut cfg);
            cfg
        }
        Command::Fselect {
            data,
            train,
            method,
            k,
            dp_entropy_eps,
        } => {
            let mut cfg = start(TaskKind::Fselect);
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            if let Some(m) = method {
                cfg.fselect.method = parse_enum("feature selection method", &m)?;
            }
            if k.is_some() {
                cfg.fselect.k = k;
            }
            if dp_entropy_eps.is_some() {
                cfg.fselect.dp_entropy_eps = dp_entropy_eps;
            }
            cfg
        }
        Command::Asearch {
            data,
            train,
            search,
        } => {
            let mut cfg = start(TaskKind::Asearch);
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            search.apply(&mut cfg)?;
            cfg
        }
        Command::Compare {
            data,
            train,
            search,
        } => {
            let mut cfg = start(TaskKind::Compare);
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            search.apply(&mut cfg)?;
            cfg
        }
        Command::Crossover { simple, complex } => {
            let mut cfg = start(TaskKind::Crossover);
            if simple.is_some() {
                cfg.crossover.simple = simple;
            }
            if complex.is_some() {
                cfg.crossover.complex = complex;
            }
            cfg
        }
        Command::Lemma {
            theta,
            x,
            y,
            sigma,
            sigma_prime,
            trials,
        } => {
            let mut cfg = start(TaskKind::Lemma);
            let l = &mut cfg.lemma;
            set(&mut l.theta, theta);
            set(&mut l.x, x);
            set(&mut l.y, y);
            set(&mut l.sigma, sigma);
            set(&mut l.sigma_prime, sigma_prime);
            set(&mut l.trials, trials);
            cfg
        }
        Command::Accountant {
            n,
            batch,
            epochs,
            noise_multiplier,
            target_epsilon,
            delta,
        } => {
            let mut cfg = start(TaskKind::Accountant);
            let a = &mut cfg.accountant;
            set(&mut a.n, n);
            set(&mut a.batch, batch);
            set(&mut a.epochs, epochs);
            set(&mut a.delta, delta);
            if noise_multiplier.is_some() {
                a.noise_multiplier = noise_multiplier;
                a.target_epsilon = None;
            }
            if target_epsilon.is_some() {
                a.target_epsilon = target_epsilon;
                a.noise_multiplier = None;
            }
            cfg
        }
        Command::Synth {
            n,
            base_dim,
            expansion,
        } => {
            let mut cfg = start(TaskKind::Synth);
            DataArgs {
                manifest: None,
                n,
                base_dim,
                expansion,
            }
            .apply(&mut cfg);
            cfg.data.synth.get_or_insert_with(SynthSection::default);
            cfg.data.manifest = None;
            cfg
        }
        Command::Fitcurve { points } => {
            let mut cfg = start(TaskKind::Fitcurve);
            if points.is_some() {
                cfg.fitcurve.points = points;
            }
            cfg
        }
        Command::Curve {
            data,
            train,
            epsilons,
            models,
            repeats,
        } => {
            let mut cfg = start(TaskKind::Curve);
            data.apply(&mut cfg);
            train.apply(&mut cfg);
            set(&mut cfg.curve.epsilons, epsilons);
            set(&mut cfg.curve.repeats, repeats);
            if !models.is_empty() {
                cfg.curve.models = models
                    .iter()
                    .map(|m| parse_curve_model(m))
                    .collect::<anyhow::Result<_>>()?;
            }
            cfg
        }
    };
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.workers, cli.workers);
    set(&mut cfg.out, cli.out);
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match runner::run(&cfg) {
        Ok(report) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report.metrics).expect("metrics serialize")
            );
            eprintln!("report: {}", report.path().display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
