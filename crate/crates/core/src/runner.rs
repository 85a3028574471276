//! Experiment configs, task dispatch, JSON run reports and curve CSVs.
//!
//! Every randomized step draws from a labeled substream of the master seed,
//! so a config reproduces its numeric outputs exactly regardless of the
//! worker count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::accountant::{
    dpsgd_accounting, dpsgd_epsilon, noise_multiplier_for_epsilon, DpSgdSetting, LedgerEntry,
    DEFAULT_DELTA_PRIME,
};
use crate::arch_search::{
    default_fcn_space, mgrs, paas, rs_search, EvolveParams, FitnessOracle, PaasParams, Realizer,
    RsAccounting, SearchOutcome, SearchSpace, TrainingOracle,
};
use crate::data::{
    save_csv, split, synthetic_sum_dataset, CsvSchema, Dataset, DatasetManifest, LabelKind, Split,
    SplitSpec,
};
use crate::error::{Error, Result};
use crate::feature_selection::{
    cfs_ga, cfs_greedy, discretize, merit, pafs, FeatureSet, GaParams, PafsParams, SucTable,
};
use crate::models::{
    evaluate, init_model, param_count, rwt_freeze, train, Activation, Architecture, Checkpoint,
    LayerSpec, Task, TrainConfig,
};
use crate::numerics::RngStream;
use crate::theory::{
    crossover_epsilon, expected_dp_error_full, expected_dp_error_reduced, fit_eps_vs_n,
    lemma1_threshold, mc_expected_error, AccuracyCurve, LinearInstance, LinearModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Train,
    Fselect,
    Asearch,
    Crossover,
    Lemma,
    Accountant,
    Synth,
    Fitcurve,
    Curve,
    /// Standard vs privacy-aware workflow on the same final budget.
    Compare,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Train => "train",
            TaskKind::Fselect => "fselect",
            TaskKind::Asearch => "asearch",
            TaskKind::Crossover => "crossover",
            TaskKind::Lemma => "lemma",
            TaskKind::Accountant => "accountant",
            TaskKind::Synth => "synth",
            TaskKind::Fitcurve => "fitcurve",
            TaskKind::Curve => "curve",
            TaskKind::Compare => "compare",
        }
    }

    fn needs_data(self) -> bool {
        matches!(
            self,
            TaskKind::Train
                | TaskKind::Fselect
                | TaskKind::Asearch
                | TaskKind::Curve
                | TaskKind::Compare
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub base_dim: usize,
    pub expansion: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n: 5000,
            base_dim: 10,
            expansion: 1,
            split: default_split(),
        }
    }
}

fn default_split() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

/// Either a dataset manifest or a synthetic-sum generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    /// Split used when the manifest does not assign one.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Softmax,
    /// One sigmoid unit; binary tasks only.
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_output")]
    pub output: OutputKind,
    #[serde(default)]
    pub dropout: f64,
    /// Train only the last `rwt_last` layers.
    #[serde(default)]
    pub rwt_last: Option<usize>,
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_output() -> OutputKind {
    OutputKind::Softmax
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: default_activation(),
            output: default_output(),
            dropout: 0.0,
            rwt_last: None,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self, input_dim: usize, task: Task) -> Result<Architecture> {
        let mut arch = Architecture::mlp(input_dim, &self.hidden, self.activation, task);
        let last = arch.layers.len() - 1;
        for l in &mut arch.layers[..last] {
            l.dropout_after = self.dropout;
        }
        if self.output == OutputKind::Sigmoid {
            arch.layers[last] = LayerSpec::new(1, Activation::Sigmoid);
        }
        if let Some(k) = self.rwt_last {
            arch = rwt_freeze(&arch, k)?;
        }
        arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub l2_reg: f64,
    #[serde(default)]
    pub dp: bool,
    #[serde(default = "default_clip")]
    pub clip_l2: f64,
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    /// Calibrates the noise multiplier to this ε instead.
    #[serde(default)]
    pub target_epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub save_model: bool,
}

fn default_lr() -> f64 {
    0.1
}
fn default_batch() -> usize {
    100
}
fn default_epochs() -> usize {
    10
}
fn default_clip() -> f64 {
    1.0
}
fn default_delta() -> f64 {
    1e-5
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch: default_batch(),
            epochs: default_epochs(),
            l2_reg: 0.0,
            dp: false,
            clip_l2: default_clip(),
            noise_multiplier: None,
            target_epsilon: None,
            delta: default_delta(),
            save_model: false,
        }
    }
}

impl TrainSection {
    fn validate(&self) -> Result<()> {
        if self.dp && self.noise_multiplier.is_none() && self.target_epsilon.is_none() {
            return Err(Error::Config(
                "dp training needs noise_multiplier or target_epsilon".into(),
            ));
        }
        if self.noise_multiplier.is_some() && self.target_epsilon.is_some() {
            return Err(Error::Config(
                "set only one of noise_multiplier and target_epsilon".into(),
            ));
        }
        if self.batch == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(
                "batch, epochs and learning_rate must be positive".into(),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) || !(self.clip_l2 > 0.0) {
            return Err(Error::Config("need 0 < delta < 1 and clip_l2 > 0".into()));
        }
        Ok(())
    }

    fn setting(&self, n: usize, z: f64) -> DpSgdSetting {
        DpSgdSetting {
            n,
            batch: self.batch,
            epochs: self.epochs,
            noise_multiplier: z,
            clip_l2: self.clip_l2,
            delta: self.delta,
        }
    }

    /// Trainer settings for `n` training rows; `target` overrides the section's ε target.
    pub fn config(
        &self,
        n: usize,
        arch: &Architecture,
        target: Option<f64>,
        dp: bool,
    ) -> Result<TrainConfig> {
        if self.batch > n {
            return Err(Error::Config(format!(
                "batch {} exceeds the {n} training rows",
                self.batch
            )));
        }
        let mut cfg = TrainConfig::sgd(
            self.learning_rate,
            self.batch,
            self.epochs,
            arch.default_loss(),
        );
        cfg.l2_reg = self.l2_reg;
        cfg.delta = self.delta;
        if dp {
            let z = match (target.or(self.target_epsilon), self.noise_multiplier) {
                (Some(eps), _) => noise_multiplier_for_epsilon(&self.setting(n, 1.0), eps)?,
                (None, Some(z)) => z,
                (None, None) => {
                    return Err(Error::Config("dp training needs a noise multiplier".into()))
                }
            };
            cfg = cfg.with_dp(self.clip_l2, z);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FselectMethod {
    CfsGreedy,
    CfsGa,
    Pafs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FselectSection {
    #[serde(default = "default_fselect")]
    pub method: FselectMethod,
    /// Subset size for the greedy method (default: all features).
    #[serde(default)]
    pub k: Option<usize>,
    /// Per-entropy budget for DP-noised SUC values.
    #[serde(default)]
    pub dp_entropy_eps: Option<f64>,
    #[serde(default = "default_ga")]
    pub ga: GaParams,
    #[serde(default = "default_delta_prime")]
    pub delta_prime: f64,
}

fn default_fselect() -> FselectMethod {
    FselectMethod::CfsGreedy
}
fn default_ga() -> GaParams {
    GaParams {
        pop_k: 50,
        gens_l: 10,
        alpha: 0.4,
        p_co: 0.5,
        p_mu: 0.3,
    }
}
fn default_delta_prime() -> f64 {
    DEFAULT_DELTA_PRIME
}

impl Default for FselectSection {
    fn default() -> Self {
        Self {
            method: default_fselect(),
            k: None,
            dp_entropy_eps: None,
            ga: default_ga(),
            delta_prime: DEFAULT_DELTA_PRIME,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMethod {
    Paas,
    Rs,
    Mgrs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsearchSection {
    #[serde(default = "default_method")]
    pub method: SearchMethod,
    /// Search-space file; the built-in FCN space when absent.
    #[serde(default)]
    pub space: Option<PathBuf>,
    #[serde(default = "default_eps_prime")]
    pub eps_prime: f64,
    #[serde(default = "default_gens")]
    pub gens_l: usize,
    #[serde(default = "default_pop")]
    pub pop_k: usize,
    #[serde(default)]
    pub evolve: EvolveParams,
    #[serde(default = "default_rs_k")]
    pub k: usize,
    #[serde(default = "default_gen_sizes")]
    pub gen_sizes: Vec<usize>,
    #[serde(default = "default_p_mutate")]
    pub p_mutate: f64,
    #[serde(default)]
    pub accounting: RsAccounting,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_delta_prime")]
    pub delta_prime: f64,
}

fn default_method() -> SearchMethod {
    SearchMethod::Paas
}
fn default_eps_prime() -> f64 {
    0.02
}
fn default_gens() -> usize {
    6
}
fn default_pop() -> usize {
    10
}
fn default_rs_k() -> usize {
    40
}
fn default_gen_sizes() -> Vec<usize> {
    vec![40, 20, 10]
}
fn default_p_mutate() -> f64 {
    0.7
}
fn default_dropout() -> f64 {
    0.2
}

impl Default for AsearchSection {
    fn default() -> Self {
        Self {
            method: default_method(),
            space: None,
            eps_prime: default_eps_prime(),
            gens_l: default_gens(),
            pop_k: default_pop(),
            evolve: EvolveParams::default(),
            k: default_rs_k(),
            gen_sizes: default_gen_sizes(),
            p_mutate: default_p_mutate(),
            accounting: RsAccounting::default(),
            dropout: default_dropout(),
            delta_prime: DEFAULT_DELTA_PRIME,
        }
    }
}

impl AsearchSection {
    fn space(&self) -> Result<SearchSpace> {
        match &self.space {
            Some(p) => SearchSpace::read(p),
            None => Ok(default_fcn_space(self.method != SearchMethod::Paas)),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossoverSection {
    #[serde(default)]
    pub simple: Option<PathBuf>,
    #[serde(default)]
    pub complex: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaSection {
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
    pub y: f64,
    pub sigma: f64,
    pub sigma_prime: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_trials() -> usize {
    1_000_000
}

impl Default for LemmaSection {
    fn default() -> Self {
        Self {
            theta: vec![1.0, 1.0],
            x: vec![1.0, 1.0],
            y: 3.0,
            sigma: 1.0,
            sigma_prime: 1.0,
            trials: default_trials(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountantSection {
    pub n: usize,
    pub batch: usize,
    pub epochs: usize,
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    #[serde(default)]
    pub target_epsilon: Option<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl Default for AccountantSection {
    fn default() -> Self {
        Self {
            n: 60000,
            batch: 200,
            epochs: 70,
            noise_multiplier: Some(2.0),
            target_epsilon: None,
            delta: default_delta(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitcurveSection {
    /// CSV with columns `n,epsilon`.
    #[serde(default)]
    pub points: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveModel {
    pub name: String,
    pub hidden: Vec<usize>,
}

/// DP accuracy-vs-ε sweep. The first model is treated as the simple one
/// when a crossover is reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSection {
    #[serde(default = "default_curve_eps")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_curve_models")]
    pub models: Vec<CurveModel>,
    #[serde(default = "one")]
    pub repeats: usize,
}

fn default_curve_eps() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 5.0, 10.0]
}
fn default_curve_models() -> Vec<CurveModel> {
    vec![
        CurveModel {
            name: "simple".into(),
            hidden: vec![8],
        },
        CurveModel {
            name: "complex".into(),
            hidden: vec![256, 256],
        },
    ]
}
fn one() -> usize {
    1
}

impl Default for CurveSection {
    fn default() -> Self {
        Self {
            epsilons: default_curve_eps(),
            models: default_curve_models(),
            repeats: 1,
        }
    }
}

/// A full experiment description. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub fselect: FselectSection,
    #[serde(default)]
    pub asearch: AsearchSection,
    #[serde(default)]
    pub crossover: CrossoverSection,
    #[serde(default)]
    pub lemma: LemmaSection,
    #[serde(default)]
    pub accountant: AccountantSection,
    #[serde(default)]
    pub fitcurve: FitcurveSection,
    #[serde(default)]
    pub curve: CurveSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl ExperimentConfig {
    pub fn new(task: TaskKind) -> Self {
        toml::from_str(&format!("task = \"{}\"", task.name())).expect("defaults parse")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path
            .as_ref()
            .parent()
            .unwrap_or(Path::new(""))
            .to_path_buf();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.data.manifest);
        resolve(base, &mut self.asearch.space);
        resolve(base, &mut self.crossover.simple);
        resolve(base, &mut self.crossover.complex);
        resolve(base, &mut self.fitcurve.points);
        if self.out.is_relative() && !base.as_os_str().is_empty() {
            self.out = base.join(&self.out);
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be >= 1");
        }
        if self.task.needs_data() || self.task == TaskKind::Synth {
            let sources =
                usize::from(self.data.manifest.is_some()) + usize::from(self.data.synth.is_some());
            if self.task == TaskKind::Synth && self.data.synth.is_none() {
                return bad("synth needs a [data.synth] section");
            }
            if sources != 1 {
                return bad("exactly one of data.manifest and data.synth is required");
            }
        }
        if self.task.needs_data() {
            self.train.validate()?;
        }
        match self.task {
            TaskKind::Crossover
                if self.crossover.simple.is_none() || self.crossover.complex.is_none() =>
            {
                bad("crossover needs simple and complex curve files")
            }
            TaskKind::Fitcurve if self.fitcurve.points.is_none() => {
                bad("fitcurve needs a points file")
            }
            TaskKind::Accountant
                if self.accountant.noise_multiplier.is_some()
                    == self.accountant.target_epsilon.is_some() =>
            {
                bad("accountant needs exactly one of noise_multiplier and target_epsilon")
            }
            TaskKind::Fselect if self.fselect.method == FselectMethod::Pafs && !self.train.dp => {
                bad("pafs trains with DP; set train.dp = true")
            }
            TaskKind::Fselect => self
                .fselect
                .ga
                .validate()
                .map_err(|e| Error::Config(e.to_string())),
            TaskKind::Curve => {
                let c = &self.curve;
                if c.models.is_empty() || c.epsilons.is_empty() || c.repeats == 0 {
                    return bad("curve needs models, epsilons and repeats >= 1");
                }
                if c.epsilons.windows(2).any(|w| w[1] <= w[0]) || c.epsilons[0] <= 0.0 {
                    return bad("curve epsilons must be positive and strictly increasing");
                }
                Ok(())
            }
            TaskKind::Compare if !self.train.dp => bad("compare needs train.dp = true"),
            TaskKind::Asearch | TaskKind::Compare => {
                if !(self.asearch.eps_prime > 0.0) {
                    return bad("eps_prime must be > 0");
                }
                let space = self.asearch.space()?;
                let realizer = Realizer {
                    input_dim: 1,
                    task: Task::Classification { classes: 2 },
                    dropout: self.asearch.dropout,
                };
                realizer.check_space(&space)
            }
            _ => Ok(()),
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// How the workflow ε follows from the ledger entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Composition {
    /// Plain sum of all entries.
    Sequential,
    /// Advanced composition over the unique training entries.
    Advanced { eps_train: f64, delta_prime: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub composition: Composition,
    pub entries: Vec<LedgerEntry>,
    pub epsilon: f64,
    pub delta: f64,
    pub unique_trainings: usize,
}

impl LedgerReport {
    fn from_entries(
        composition: Composition,
        entries: Vec<LedgerEntry>,
        delta: f64,
    ) -> Result<Self> {
        let mut r = Self {
            composition,
            entries,
            epsilon: 0.0,
            delta,
            unique_trainings: 0,
        };
        r.unique_trainings = r.ledger().unique_trainings();
        r.epsilon = r.recompute()?;
        Ok(r)
    }

    fn ledger(&self) -> crate::accountant::CompositionLedger {
        let mut l = crate::accountant::CompositionLedger::new();
        for e in &self.entries {
            l.record(e.label.clone(), e.epsilon, e.delta, e.training);
        }
        l
    }

    /// Workflow ε recomputed from the entries.
    pub fn recompute(&self) -> Result<f64> {
        let ledger = self.ledger();
        match self.composition {
            Composition::Sequential => Ok(ledger.sequential_epsilon()),
            Composition::Advanced {
                eps_train,
                delta_prime,
            } => ledger.advanced_epsilon(eps_train, delta_prime),
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.recompute().is_ok_and(|e| e == self.epsilon)
            && self.ledger().unique_trainings() == self.unique_trainings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: TaskKind,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    pub metrics: BTreeMap<String, Value>,
    #[serde(default)]
    pub ledger: Option<LedgerReport>,
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

impl RunReport {
    pub fn path(&self) -> PathBuf {
        report_path(&self.config, &self.config_hash)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn report_path(cfg: &ExperimentConfig, hash: &str) -> PathBuf {
    cfg.out
        .join(format!("report-{}-{hash}.json", cfg.task.name()))
}

/// Accumulates results so a failing run can still flush what it has.
#[derive(Default)]
struct Recorder {
    metrics: BTreeMap<String, Value>,
    artifacts: Vec<PathBuf>,
    ledger: Option<LedgerReport>,
}

impl Recorder {
    fn put(&mut self, key: &str, value: impl Serialize) {
        self.metrics.insert(
            key.to_string(),
            serde_json::to_value(value).expect("metric serializes"),
        );
    }
}

/// Writes `curve` as `curve-<hash>-<name>.csv` in `dir`.
pub fn emit_curve(
    dir: &Path,
    config_hash: &str,
    name: &str,
    curve: &AccuracyCurve,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("curve-{config_hash}-{name}.csv"));
    curve.write_csv(&path)?;
    Ok(path)
}

/// Validates `cfg`, runs its task on a pool of `cfg.workers` threads and
/// writes the JSON report to `cfg.out`. On a runtime failure the partial
/// report (status `failed`) is written before the error is returned.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let hash = cfg.hash();
    std::fs::create_dir_all(&cfg.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut rec = Recorder::default();
    let outcome = pool.install(|| dispatch(cfg, &hash, &mut rec));
    let report = RunReport {
        task: cfg.task,
        config_hash: hash.clone(),
        config: cfg.clone(),
        status: if outcome.is_ok() {
            RunStatus::Ok
        } else {
            RunStatus::Failed
        },
        error: outcome.as_ref().err().map(|e| e.to_string()),
        metrics: rec.metrics,
        ledger: rec.ledger,
        artifacts: rec.artifacts,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    std::fs::write(
        report_path(cfg, &hash),
        serde_json::to_string_pretty(&report)?,
    )?;
    outcome.map(|_| report)
}

fn dispatch(cfg: &ExperimentConfig, hash: &str, rec: &mut Recorder) -> Result<()> {
    match cfg.task {
        TaskKind::Train => task_train(cfg, hash, rec),
        TaskKind::Fselect => task_fselect(cfg, rec),
        TaskKind::Asearch => task_asearch(cfg, rec),
        TaskKind::Crossover => task_crossover(cfg, rec),
        TaskKind::Lemma => task_lemma(cfg, rec),
        TaskKind::Accountant => task_accountant(cfg, rec),
        TaskKind::Synth => task_synth(cfg, hash, rec),
        TaskKind::Fitcurve => task_fitcurve(cfg, rec),
        TaskKind::Curve => task_curve(cfg, hash, rec),
        TaskKind::Compare => task_compare(cfg, rec),
    }
}

/// Loads the configured data with train/val/test rows assigned.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let split_rng = || RngStream::derive(cfg.seed, "split");
    if let Some(s) = &cfg.data.synth {
        let ds = synthetic_sum_dataset(
            s.n,
            s.base_dim,
            s.expansion,
            &RngStream::derive(cfg.seed, "data"),
        )?;
        return split(&ds, s.split, &mut split_rng());
    }
    let path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("no data source".into()))?;
    let ds = DatasetManifest::read(path)?.load()?;
    if ds.splits.iter().all(Option::is_none) {
        return split(&ds, cfg.data.split, &mut split_rng());
    }
    Ok(ds)
}

fn task_of(ds: &Dataset) -> Task {
    match ds.y.classes() {
        Some(classes) => Task::Classification { classes },
        None => Task::Regression,
    }
}

fn test_part(ds: &Dataset) -> Dataset {
    let test = ds.part(Split::Test);
    if test.n() > 0 {
        test
    } else {
        ds.part(Split::Val)
    }
}

struct Trained {
    val: f64,
    test: f64,
    epsilon: Option<f64>,
    noise_multiplier: Option<f64>,
    model: crate::models::Model,
}

fn train_eval(
    arch: &Architecture,
    cfg: &TrainConfig,
    ds: &Dataset,
    rng: &RngStream,
) -> Result<Trained> {
    let tr = ds.part(Split::Train);
    let mut model = init_model(arch, &mut rng.child("init"))?;
    let outcome = train(&mut model, &tr.x, &tr.y, cfg, &rng.child("train"), None)?;
    let val_part = ds.part(Split::Val);
    let val = if val_part.n() > 0 {
        evaluate(&model, &val_part)?
    } else {
        f64::NAN
    };
    Ok(Trained {
        val,
        test: evaluate(&model, &test_part(ds))?,
        epsilon: outcome.epsilon,
        noise_multiplier: cfg.noise_multiplier,
        model,
    })
}

fn task_train(cfg: &ExperimentConfig, hash: &str, rec: &mut Recorder) -> Result<()> {
    let ds = load_data(cfg)?;
    let n_train = ds.split_rows(Split::Train).len();
    let arch = cfg.model.architecture(ds.m(), task_of(&ds))?;
    let tcfg = cfg.train.config(n_train, &arch, None, cfg.train.dp)?;
    rec.put("n_train", n_train);
    rec.put("input_dim", ds.m());
    rec.put("params", param_count(&arch));
    let t = train_eval(&arch, &tcfg, &ds, &RngStream::derive(cfg.seed, "train"))?;
    rec.put("val_metric", t.val);
    rec.put("test_metric", t.test);
    rec.put("epsilon", t.epsilon);
    rec.put("delta", t.epsilon.map(|_| tcfg.delta));
    rec.put("noise_multiplier", t.noise_multiplier);
    if let Some(eps) = t.epsilon {
        let entry = LedgerEntry {
            label: "train".into(),
            epsilon: eps,
            delta: tcfg.delta,
            training: true,
        };
        rec.ledger = Some(LedgerReport::from_entries(
            Composition::Sequential,
            vec![entry],
            tcfg.delta,
        )?);
    }
    if cfg.train.save_model {
        let path = cfg.out.join(format!("model-{hash}.json"));
        Checkpoint::new(&t.model, t.epsilon, t.epsilon.map(|_| tcfg.delta), cfg.seed)
            .save(&path)?;
        rec.artifacts.push(path);
    }
    Ok(())
}

fn task_fselect(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let ds = load_data(cfg)?;
    let tr = ds.part(Split::Train);
    let fs = &cfg.fselect;
    let all = FeatureSet::all(ds.m());
    let mut rng = RngStream::derive(cfg.seed, "fselect");
    let names = |s: &FeatureSet| {
        s.indices()
            .iter()
            .map(|&i| ds.columns[i].name.clone())
            .collect::<Vec<_>>()
    };
    match fs.method {
        FselectMethod::CfsGreedy | FselectMethod::CfsGa => {
            let disc = discretize(&tr)?;
            let table = match fs.dp_entropy_eps {
                Some(eps) => SucTable::build_dp(&disc, eps, &rng.child("suc"))?,
                None => SucTable::build(&disc)?,
            };
            let best = if fs.method == FselectMethod::CfsGreedy {
                cfs_greedy(&all, fs.k.unwrap_or(ds.m()), &table)?
            } else {
                let r = cfs_ga(&all, &fs.ga, &table, &mut rng)?;
                rec.put("trace", &r.trace);
                r.best
            };
            rec.put("merit", merit(&best, &table)?);
            rec.put("selected", best.indices());
            rec.put("selected_names", names(&best));
            if let Some(eps) = fs.dp_entropy_eps {
                // Three noisy entropies per SUC value.
                let m = ds.m();
                let queries = 3 * (m + m * (m - 1) / 2);
                let entry = LedgerEntry {
                    label: "suc_table".into(),
                    epsilon: eps * queries as f64,
                    delta: 0.0,
                    training: false,
                };
                rec.ledger = Some(LedgerReport::from_entries(
                    Composition::Sequential,
                    vec![entry],
                    0.0,
                )?);
            }
        }
        FselectMethod::Pafs => {
            let n_train = tr.n();
            let val = ds.part(Split::Val);
            let task = task_of(&ds);
            let base = RngStream::derive(cfg.seed, "pafs/train");
            // Per-training ε depends only on (n, batch, epochs, z), not on the subset.
            let probe = cfg.model.architecture(1, task)?;
            let tcfg = cfg.train.config(n_train, &probe, None, true)?;
            let eps_train =
                dpsgd_epsilon(&cfg.train.setting(n_train, tcfg.noise_multiplier.unwrap()))?;
            let fitness = |s: &FeatureSet| -> Result<f64> {
                let arch = cfg.model.architecture(s.len(), task)?;
                let sub_tr = tr.select_features(s.indices())?;
                let sub_val = val.select_features(s.indices())?;
                let rng = base.child(s.key());
                let mut model = init_model(&arch, &mut rng.child("init"))?;
                train(
                    &mut model,
                    &sub_tr.x,
                    &sub_tr.y,
                    &tcfg,
                    &rng.child("train"),
                    None,
                )?;
                evaluate(&model, &sub_val)
            };
            let params = PafsParams {
                ga: fs.ga,
                eps_per_training: eps_train,
                delta_prime: fs.delta_prime,
            };
            let r = pafs(&all, &params, fitness, &mut rng)?;
            rec.put("selected", r.search.best.indices());
            rec.put("selected_names", names(&r.search.best));
            rec.put("best_fitness", r.search.best_fitness);
            rec.put("trace", &r.search.trace);
            rec.put("unique_trainings", r.unique_trainings);
            rec.put("eps_train", eps_train);
            rec.put("total_epsilon", r.total_epsilon);
            // The GA evaluates each distinct subset once, so keys are unique.
            let entries = (0..r.unique_trainings)
                .map(|i| LedgerEntry {
                    label: format!("pafs/{i}"),
                    epsilon: eps_train,
                    delta: tcfg.delta,
                    training: true,
                })
                .collect();
            let ledger = LedgerReport::from_entries(
                Composition::Advanced {
                    eps_train,
                    delta_prime: fs.delta_prime,
                },
                entries,
                tcfg.delta,
            )?;
            if ledger.epsilon != r.total_epsilon {
                return Err(Error::Infeasible(
                    "PAFS ledger disagrees with the search budget".into(),
                ));
            }
            rec.ledger = Some(ledger);
        }
    }
    Ok(())
}

/// Runs the configured search method with `oracle`.
fn search(
    cfg: &ExperimentConfig,
    space: &SearchSpace,
    oracle: &dyn FitnessOracle,
    rng: &RngStream,
) -> Result<SearchOutcome> {
    let a = &cfg.asearch;
    match a.method {
        SearchMethod::Paas => {
            let p = PaasParams {
                gens_l: a.gens_l,
                pop_k: a.pop_k,
                evolve: a.evolve,
                delta_prime: a.delta_prime,
            };
            paas(space, &p, oracle, rng)
        }
        SearchMethod::Rs => rs_search(space, a.k, oracle, &a.accounting, rng),
        SearchMethod::Mgrs => mgrs(space, &a.gen_sizes, a.p_mutate, oracle, &a.accounting, rng),
    }
}

/// Ledger for a search outcome whose oracle trains with `(eps_train, delta)`.
fn search_ledger(
    cfg: &ExperimentConfig,
    out: &SearchOutcome,
    eps_train: f64,
    delta: f64,
) -> Result<LedgerReport> {
    let report = match cfg.asearch.method {
        SearchMethod::Paas => LedgerReport::from_entries(
            Composition::Advanced {
                eps_train,
                delta_prime: cfg.asearch.delta_prime,
            },
            out.ledger
                .entries()
                .iter()
                .filter(|e| e.training)
                .cloned()
                .collect(),
            delta,
        )?,
        SearchMethod::Rs | SearchMethod::Mgrs => {
            let mut entries = vec![LedgerEntry {
                label: "final_training".into(),
                epsilon: eps_train,
                delta,
                training: true,
            }];
            entries.extend(out.eps_prime.iter().enumerate().map(|(g, e)| LedgerEntry {
                label: format!("selection/{g}"),
                epsilon: 8.0 * e,
                delta: 0.0,
                training: false,
            }));
            LedgerReport::from_entries(Composition::Sequential, entries, delta)?
        }
    };
    if Some(report.epsilon) != out.total_epsilon {
        return Err(Error::Infeasible(
            "search ledger disagrees with the search budget".into(),
        ));
    }
    Ok(report)
}

fn search_oracle(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    dp: bool,
    eps_prime: f64,
) -> Result<TrainingOracle> {
    let tr = ds.part(Split::Train);
    let val = ds.part(Split::Val);
    let task = task_of(ds);
    let probe = cfg.model.architecture(ds.m(), task)?;
    let tcfg = cfg.train.config(tr.n(), &probe, None, dp)?;
    let realizer = Realizer {
        input_dim: ds.m(),
        task,
        dropout: cfg.asearch.dropout,
    };
    TrainingOracle::new(tr, val, realizer, tcfg, eps_prime)
}

fn put_search(
    rec: &mut Recorder,
    prefix: &str,
    space: &SearchSpace,
    oracle: &TrainingOracle,
    out: &SearchOutcome,
) -> Result<Architecture> {
    let arch = oracle.realizer.realize(space, &out.best)?;
    rec.put(&format!("{prefix}best_key"), &out.best.key);
    rec.put(&format!("{prefix}best_fitness"), out.best_fitness);
    rec.put(&format!("{prefix}best_architecture"), &arch);
    rec.put(&format!("{prefix}generations"), &out.generations);
    rec.put(&format!("{prefix}unique_trainings"), out.unique_trainings);
    rec.put(&format!("{prefix}total_epsilon"), out.total_epsilon);
    Ok(arch)
}

fn task_asearch(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let ds = load_data(cfg)?;
    let space = cfg.asearch.space()?;
    let oracle = search_oracle(cfg, &ds, cfg.train.dp, cfg.asearch.eps_prime)?;
    let out = search(
        cfg,
        &space,
        &oracle,
        &RngStream::derive(cfg.seed, "asearch"),
    )?;
    put_search(rec, "", &space, &oracle, &out)?;
    if let Some(b) = oracle.training_budget() {
        rec.put("eps_train", b.epsilon);
        rec.ledger = Some(search_ledger(cfg, &out, b.epsilon, b.delta)?);
    }
    Ok(())
}

/// Standard workflow (non-private search, DP final training) against the
/// privacy-aware one (DP training and noised fitness inside the search),
/// with the same final-training budget.
fn task_compare(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let ds = load_data(cfg)?;
    let space = cfg.asearch.space()?;
    let final_rng = RngStream::derive(cfg.seed, "final");
    for (prefix, dp, eps_prime) in [
        ("stw_", false, f64::INFINITY),
        ("paw_", true, cfg.asearch.eps_prime),
    ] {
        let oracle = search_oracle(cfg, &ds, dp, eps_prime)?;
        let out = search(
            cfg,
            &space,
            &oracle,
            &RngStream::derive(cfg.seed, "asearch"),
        )?;
        let arch = put_search(rec, prefix, &space, &oracle, &out)?;
        let tcfg = cfg.train.config(oracle.train.n(), &arch, None, true)?;
        let t = train_eval(&arch, &tcfg, &ds, &final_rng)?;
        rec.put(&format!("{prefix}test_metric"), t.test);
        rec.put(&format!("{prefix}final_epsilon"), t.epsilon);
        if dp {
            let b = oracle.training_budget().expect("dp oracle has a budget");
            rec.ledger = Some(search_ledger(cfg, &out, b.epsilon, b.delta)?);
        }
    }
    // The standard workflow's search touches the data without noise.
    rec.put("stw_workflow_private", false);
    Ok(())
}

fn task_crossover(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let simple = AccuracyCurve::read_csv(cfg.crossover.simple.as_ref().unwrap())?;
    let complex = AccuracyCurve::read_csv(cfg.crossover.complex.as_ref().unwrap())?;
    let r = crossover_epsilon(&simple, &complex)?;
    rec.put("estimate", r.estimate);
    rec.put("interpolated", r.interpolated);
    rec.put("sign_changes", &r.sign_changes);
    rec.put("diagnostic", &r.diagnostic);
    Ok(())
}

fn task_lemma(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let l = &cfg.lemma;
    let inst = LinearInstance {
        theta: l.theta.clone(),
        x: l.x.clone(),
        y: l.y,
        sigma: l.sigma,
        sigma_prime: l.sigma_prime,
    };
    let rng = RngStream::derive(cfg.seed, "lemma");
    rec.put("expected_full", expected_dp_error_full(&inst)?);
    rec.put("expected_reduced", expected_dp_error_reduced(&inst)?);
    rec.put("threshold", lemma1_threshold(&inst)?);
    rec.put("theta_m", *inst.theta.last().unwrap());
    rec.put(
        "mc_full",
        mc_expected_error(LinearModel::Full, &inst, l.trials, &rng)?,
    );
    rec.put(
        "mc_reduced",
        mc_expected_error(LinearModel::Reduced, &inst, l.trials, &rng)?,
    );
    Ok(())
}

fn task_accountant(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let a = &cfg.accountant;
    let mut setting = DpSgdSetting {
        n: a.n,
        batch: a.batch,
        epochs: a.epochs,
        noise_multiplier: a.noise_multiplier.unwrap_or(1.0),
        clip_l2: 1.0,
        delta: a.delta,
    };
    if let Some(target) = a.target_epsilon {
        setting.noise_multiplier = noise_multiplier_for_epsilon(&setting, target)?;
    }
    let r = dpsgd_accounting(&setting)?;
    rec.put("noise_multiplier", setting.noise_multiplier);
    rec.put("epsilon", r.epsilon);
    rec.put("delta", a.delta);
    rec.put("best_order", r.best_order);
    rec.put("steps", r.steps);
    rec.put("q", r.q);
    Ok(())
}

fn task_synth(cfg: &ExperimentConfig, hash: &str, rec: &mut Recorder) -> Result<()> {
    let s = cfg.data.synth.as_ref().expect("validated");
    let ds = synthetic_sum_dataset(
        s.n,
        s.base_dim,
        s.expansion,
        &RngStream::derive(cfg.seed, "data"),
    )?;
    let csv_name = format!("synth-{hash}.csv");
    let csv_path = cfg.out.join(&csv_name);
    save_csv(&ds, &csv_path, "label")?;
    let manifest = DatasetManifest {
        path: PathBuf::from(csv_name),
        schema: CsvSchema {
            label: "label".into(),
            label_kind: LabelKind::Class,
            categorical: Vec::new(),
            classes: Some(vec!["0".into(), "1".into()]),
        },
        one_hot: false,
        normalize: false,
        split: Some(SplitSpec {
            train: s.split[0],
            val: s.split[1],
            test: s.split[2],
            seed: cfg.seed,
        }),
    };
    let manifest_path = cfg.out.join(format!("synth-{hash}.toml"));
    std::fs::write(
        &manifest_path,
        toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    let positives = (0..ds.n())
        .filter(|&i| ds.y.target(i) == crate::data::Target::Class(1))
        .count();
    rec.put("n", ds.n());
    rec.put("m", ds.m());
    rec.put("positive_fraction", positives as f64 / ds.n() as f64);
    rec.artifacts.push(csv_path);
    rec.artifacts.push(manifest_path);
    Ok(())
}

#[derive(Debug, Deserialize)]
struct NEpsRow {
    n: f64,
    epsilon: f64,
}

fn task_fitcurve(cfg: &ExperimentConfig, rec: &mut Recorder) -> Result<()> {
    let mut rd = csv::Reader::from_path(cfg.fitcurve.points.as_ref().unwrap())?;
    let rows = rd
        .deserialize::<NEpsRow>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n, r.epsilon)).collect();
    let fit = fit_eps_vs_n(&pts)?;
    rec.put("alpha", fit.alpha);
    rec.put("beta", fit.beta);
    rec.put("residual", fit.residual);
    rec.put("alpha_clamped", fit.alpha_clamped);
    Ok(())
}

fn task_curve(cfg: &ExperimentConfig, hash: &str, rec: &mut Recorder) -> Result<()> {
    let ds = load_data(cfg)?;
    let n_train = ds.split_rows(Split::Train).len();
    let task = task_of(&ds);
    let c = &cfg.curve;
    let mut curves = Vec::with_capacity(c.models.len());
    for spec in &c.models {
        let model = ModelSection {
            hidden: spec.hidden.clone(),
            ..cfg.model.clone()
        };
        let arch = model.architecture(ds.m(), task)?;
        let mut points = Vec::with_capacity(c.epsilons.len());
        for &eps in &c.epsilons {
            let tcfg = cfg.train.config(n_train, &arch, Some(eps), true)?;
            let mut total = 0.0;
            for r in 0..c.repeats {
                let rng = RngStream::derive(cfg.seed, "curve").child(format!("{r}"));
                total += train_eval(&arch, &tcfg, &ds, &rng)?.test;
            }
            points.push((eps, total / c.repeats as f64));
        }
        let mut nonprivate = 0.0;
        let tcfg = cfg.train.config(n_train, &arch, None, false)?;
        for r in 0..c.repeats {
            let rng = RngStream::derive(cfg.seed, "curve").child(format!("{r}"));
            nonprivate += train_eval(&arch, &tcfg, &ds, &rng)?.test;
        }
        let curve = AccuracyCurve::new(points)?;
        rec.put(&format!("{}_curve", spec.name), curve.points());
        rec.put(
            &format!("{}_nonprivate", spec.name),
            nonprivate / c.repeats as f64,
        );
        rec.artifacts
            .push(emit_curve(&cfg.out, hash, &spec.name, &curve)?);
        curves.push(curve);
    }
    if curves.len() == 2 {
        let r = crossover_epsilon(&curves[0], &curves[1])?;
        rec.put(
            "crossover",
            json!({ "estimate": r.estimate, "interpolated": r.interpolated }),
        );
    }
    Ok(())
}
