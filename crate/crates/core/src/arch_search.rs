//! Architecture search over declarative search spaces: PAAS (genetic), RS
//! (independent random sampling) and MGRS (multi-generation random search).
//!
//! Fitness is validation accuracy plus `Lap(1/(n ε′))`. Every distinct
//! architecture is trained once per run; its noised fitness is cached with
//! it, so repeated appearances never trigger a fresh query.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{
    advanced_composition, mgrs_workflow_budget, rs_epsilon_prime, CompositionLedger, DpSgdSetting,
    DEFAULT_DELTA_PRIME,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mechanisms::{laplace_perturb, PrivacyBudget};
use crate::models::{
    evaluate, init_model, train, Activation, Architecture, LayerSpec, Task, TrainConfig,
};
use crate::numerics::RngStream;

/// One value of an architectural choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GeneValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for GeneValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneValue::Bool(b) => write!(f, "{b}"),
            GeneValue::Int(i) => write!(f, "{i}"),
            GeneValue::Float(x) => write!(f, "{x:?}"),
            GeneValue::Text(s) => write!(f, "{s}"),
        }
    }
}

impl GeneValue {
    fn from_toml(v: &toml::Value) -> Result<Self> {
        Ok(match v {
            toml::Value::Boolean(b) => GeneValue::Bool(*b),
            toml::Value::Integer(i) => GeneValue::Int(*i),
            toml::Value::Float(x) => GeneValue::Float(*x),
            toml::Value::String(s) => GeneValue::Text(s.clone()),
            other => return Err(Error::Config(format!("unsupported choice value {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    pub name: String,
    pub values: Vec<GeneValue>,
}

/// Named choices, each with a finite ordered value list. Choices are kept in
/// name order, which fixes the gene layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    choices: Vec<Choice>,
}

impl SearchSpace {
    pub fn new(choices: impl IntoIterator<Item = (String, Vec<GeneValue>)>) -> Result<Self> {
        let map: BTreeMap<String, Vec<GeneValue>> = choices.into_iter().collect();
        if map.is_empty() {
            return Err(Error::Config("search space has no choices".into()));
        }
        if let Some((name, _)) = map.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("choice '{name}' has no values")));
        }
        Ok(Self {
            choices: map
                .into_iter()
                .map(|(name, values)| Choice { name, values })
                .collect(),
        })
    }

    /// Parses `name = [v1, v2, ...]` lines.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let choices = table
            .into_iter()
            .map(|(name, v)| match v {
                toml::Value::Array(items) => Ok((
                    name,
                    items
                        .iter()
                        .map(GeneValue::from_toml)
                        .collect::<Result<Vec<_>>>()?,
                )),
                _ => Err(Error::Config(format!("choice '{name}' must be a list"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(choices)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn choices(&self) -> &[Choice] {
        &self.choices
    }

    /// Number of gene combinations.
    pub fn size(&self) -> usize {
        self.choices.iter().map(|c| c.values.len()).product()
    }

    pub fn individual(&self, genes: Vec<usize>) -> Result<Individual> {
        if genes.len() != self.choices.len() {
            return Err(Error::arg("gene count does not match the search space"));
        }
        for (g, c) in genes.iter().zip(&self.choices) {
            if *g >= c.values.len() {
                return Err(Error::arg(format!(
                    "gene {g} out of range for '{}'",
                    c.name
                )));
            }
        }
        let key = self
            .choices
            .iter()
            .zip(&genes)
            .map(|(c, &g)| format!("{}={}", c.name, c.values[g]))
            .collect::<Vec<_>>()
            .join(";");
        Ok(Individual { genes, key })
    }

    /// Every individual, in lexicographic gene order.
    pub fn enumerate(&self) -> Vec<Individual> {
        let mut out = Vec::with_capacity(self.size());
        let mut genes = vec![0usize; self.choices.len()];
        loop {
            out.push(self.individual(genes.clone()).expect("in range"));
            let mut i = genes.len();
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                genes[i] += 1;
                if genes[i] < self.choices[i].values.len() {
                    break;
                }
                genes[i] = 0;
            }
        }
    }

    pub fn value(&self, ind: &Individual, name: &str) -> Option<&GeneValue> {
        self.choices
            .iter()
            .zip(&ind.genes)
            .find(|(c, _)| c.name == name)
            .map(|(c, &g)| &c.values[g])
    }
}

/// The standard FCN space: 1-3 layers, per-layer units and activation, and
/// optionally a trainable flag per hidden layer.
pub fn default_fcn_space(trainable_flags: bool) -> SearchSpace {
    let ints = |v: &[i64]| v.iter().map(|&i| GeneValue::Int(i)).collect::<Vec<_>>();
    let acts = || {
        ["relu", "sigmoid", "tanh"]
            .iter()
            .map(|a| GeneValue::Text(a.to_string()))
            .collect::<Vec<_>>()
    };
    let mut choices = vec![
        ("num_layers".to_string(), ints(&[1, 2, 3])),
        ("units_1".to_string(), ints(&[64, 128, 512, 1024, 2048])),
        ("units_2".to_string(), ints(&[64, 128, 256])),
        ("units_3".to_string(), ints(&[10, 16, 32, 64])),
    ];
    for i in 1..=3 {
        choices.push((format!("activation_{i}"), acts()));
        if trainable_flags {
            choices.push((
                format!("trainable_{i}"),
                vec![GeneValue::Bool(true), GeneValue::Bool(false)],
            ));
        }
    }
    SearchSpace::new(choices).expect("static space is valid")
}

/// Gene assignment (value indices, in choice order) and its canonical key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Individual {
    pub genes: Vec<usize>,
    pub key: String,
}

/// Each choice drawn uniformly and independently.
pub fn sample_architecture(space: &SearchSpace, rng: &mut RngStream) -> Individual {
    let genes = space
        .choices
        .iter()
        .map(|c| rng.index(c.values.len()))
        .collect();
    space.individual(genes).expect("sampled in range")
}

/// Per-gene uniform crossover.
pub fn crossover(
    space: &SearchSpace,
    a: &Individual,
    b: &Individual,
    rng: &mut RngStream,
) -> Result<Individual> {
    if a.genes.len() != b.genes.len() || a.genes.len() != space.choices.len() {
        return Err(Error::arg(
            "crossover of individuals from different search spaces",
        ));
    }
    let genes = a
        .genes
        .iter()
        .zip(&b.genes)
        .map(|(&x, &y)| if rng.bernoulli(0.5) { x } else { y })
        .collect();
    space.individual(genes)
}

/// Re-samples one uniformly chosen gene (possibly to the same value).
pub fn mutate(space: &SearchSpace, a: &Individual, rng: &mut RngStream) -> Individual {
    let mut genes = a.genes.clone();
    let i = rng.index(genes.len());
    genes[i] = rng.index(space.choices[i].values.len());
    space.individual(genes).expect("mutated in range")
}

/// `accuracy + Lap(1/(n ε′))`; an infinite ε′ returns the accuracy unchanged.
pub fn noised_fitness(
    accuracy: f64,
    validation_size: usize,
    eps_prime: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if validation_size == 0 {
        return Err(Error::arg("empty validation set"));
    }
    laplace_perturb(accuracy, 1.0 / validation_size as f64, eps_prime, rng)
}

/// Trains a candidate and reports its validation accuracy.
pub trait FitnessOracle: Sync {
    /// Noise-free validation accuracy of the architecture trained with `rng`.
    fn accuracy(&self, space: &SearchSpace, ind: &Individual, rng: &RngStream) -> Result<f64>;

    fn validation_size(&self) -> usize;

    /// Budget of the Laplace fitness noise; `f64::INFINITY` disables it.
    fn eps_prime(&self) -> f64;

    /// Per-training `(ε, δ)`, or `None` for non-private training.
    fn training_budget(&self) -> Option<PrivacyBudget>;
}

/// Maps genes to an FCN.
///
/// Recognized choices: `num_layers`; `units_<i>` or a shared `units` /
/// `num_units_per_layer`; `activation_<i>` or a shared `activation` /
/// `activation_fn`; optional `trainable_<i>` and `dropout`. Layers are
/// numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realizer {
    pub input_dim: usize,
    pub task: Task,
    /// Dropout after each hidden layer when the space has no `dropout` choice.
    pub dropout: f64,
}

const CONV_KEYS: [&str; 6] = [
    "basic_blocks",
    "filters",
    "conv",
    "kernel",
    "pool",
    "fc_units",
];

impl Realizer {
    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        for c in space.choices() {
            let n = c.name.as_str();
            if CONV_KEYS.iter().any(|k| n.contains(k)) {
                return Err(Error::Config(format!(
                    "choice '{n}' describes a convolutional layer; only fully-connected spaces are supported"
                )));
            }
            let base = n
                .trim_end_matches(|ch: char| ch.is_ascii_digit())
                .trim_end_matches('_');
            let known = matches!(
                base,
                "num_layers"
                    | "units"
                    | "num_units_per_layer"
                    | "activation"
                    | "activation_fn"
                    | "trainable"
                    | "dropout"
            );
            if !known {
                return Err(Error::Config(format!("unknown architecture choice '{n}'")));
            }
        }
        if space.value(&sample_any(space), "num_layers").is_none() {
            return Err(Error::Config(
                "search space needs a num_layers choice".into(),
            ));
        }
        Ok(())
    }

    pub fn realize(&self, space: &SearchSpace, ind: &Individual) -> Result<Architecture> {
        let int = |name: &str| -> Result<Option<usize>> {
            match space.value(ind, name) {
                None => Ok(None),
                Some(GeneValue::Int(i)) if *i > 0 => Ok(Some(*i as usize)),
                Some(v) => Err(Error::Config(format!(
                    "'{name}' must be a positive integer, got {v}"
                ))),
            }
        };
        let layers =
            int("num_layers")?.ok_or_else(|| Error::Config("missing num_layers".into()))?;
        let dropout = match space.value(ind, "dropout") {
            None => self.dropout,
            Some(GeneValue::Float(x)) => *x,
            Some(GeneValue::Int(0)) => 0.0,
            Some(v) => {
                return Err(Error::Config(format!(
                    "'dropout' must be a number, got {v}"
                )))
            }
        };
        let mut specs = Vec::with_capacity(layers + 1);
        for i in 1..=layers {
            let units = match int(&format!("units_{i}"))? {
                Some(u) => u,
                None => int("units")?
                    .or(int("num_units_per_layer")?)
                    .ok_or_else(|| Error::Config(format!("no unit count for layer {i}")))?,
            };
            let act = [
                format!("activation_{i}"),
                "activation".into(),
                "activation_fn".into(),
            ]
            .iter()
            .find_map(|k| space.value(ind, k))
            .ok_or_else(|| Error::Config(format!("no activation for layer {i}")))?;
            let activation = parse_activation(act)?;
            let trainable = match space.value(ind, &format!("trainable_{i}")) {
                None => true,
                Some(GeneValue::Bool(b)) => *b,
                Some(v) => {
                    return Err(Error::Config(format!(
                        "'trainable_{i}' must be a boolean, got {v}"
                    )))
                }
            };
            specs.push(LayerSpec {
                units,
                activation,
                dropout_after: dropout,
                trainable,
            });
        }
        let mut out = Architecture::output_layer(self.task);
        out.trainable = match space.value(ind, &format!("trainable_{}", layers + 1)) {
            Some(GeneValue::Bool(b)) => *b,
            _ => true,
        };
        specs.push(out);
        let arch = Architecture {
            input_dim: self.input_dim,
            layers: specs,
            task: self.task,
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn sample_any(space: &SearchSpace) -> Individual {
    space
        .individual(vec![0; space.choices().len()])
        .expect("zero genes are valid")
}

fn parse_activation(v: &GeneValue) -> Result<Activation> {
    let GeneValue::Text(s) = v else {
        return Err(Error::Config(format!("activation must be a name, got {v}")));
    };
    match s.to_ascii_lowercase().as_str() {
        "relu" => Ok(Activation::Relu),
        "sigmoid" => Ok(Activation::Sigmoid),
        "tanh" => Ok(Activation::Tanh),
        "linear" => Ok(Activation::Linear),
        other => Err(Error::Config(format!("unknown activation '{other}'"))),
    }
}

/// Trains each candidate on `train` with `config` and scores it on `val`.
pub struct TrainingOracle {
    pub train: Dataset,
    pub val: Dataset,
    pub realizer: Realizer,
    pub config: TrainConfig,
    pub eps_prime: f64,
}

impl TrainingOracle {
    pub fn new(
        train: Dataset,
        val: Dataset,
        realizer: Realizer,
        config: TrainConfig,
        eps_prime: f64,
    ) -> Result<Self> {
        if train.n() == 0 || val.n() == 0 {
            return Err(Error::arg("training and validation sets must be nonempty"));
        }
        if !(eps_prime > 0.0) {
            return Err(Error::arg("eps' must be > 0"));
        }
        config.validate()?;
        Ok(Self {
            train,
            val,
            realizer,
            config,
            eps_prime,
        })
    }
}

impl FitnessOracle for TrainingOracle {
    fn accuracy(&self, space: &SearchSpace, ind: &Individual, rng: &RngStream) -> Result<f64> {
        let arch = self.realizer.realize(space, ind)?;
        let mut model = init_model(&arch, &mut rng.child("init"))?;
        let cfg = TrainConfig {
            loss: arch.default_loss(),
            ..self.config.clone()
        };
        train(
            &mut model,
            &self.train.x,
            &self.train.y,
            &cfg,
            &rng.child("train"),
            None,
        )?;
        evaluate(&model, &self.val)
    }

    fn validation_size(&self) -> usize {
        self.val.n()
    }

    fn eps_prime(&self) -> f64 {
        self.eps_prime
    }

    fn training_budget(&self) -> Option<PrivacyBudget> {
        let (c, z) = self.config.clip_l2.zip(self.config.noise_multiplier)?;
        let setting = DpSgdSetting {
            n: self.train.n(),
            batch: self.config.batch,
            epochs: self.config.epochs,
            noise_multiplier: z,
            clip_l2: c,
            delta: self.config.delta,
        };
        let eps = crate::accountant::dpsgd_epsilon(&setting).ok()?;
        Some(PrivacyBudget {
            epsilon: eps,
            delta: self.config.delta,
        })
    }
}

/// Memoized fitness evaluation shared by the search drivers.
struct Evaluator<'a> {
    space: &'a SearchSpace,
    oracle: &'a dyn FitnessOracle,
    stream: RngStream,
    memo: BTreeMap<String, f64>,
    order: Vec<String>,
}

impl<'a> Evaluator<'a> {
    fn new(space: &'a SearchSpace, oracle: &'a dyn FitnessOracle, rng: &RngStream) -> Self {
        Self {
            space,
            oracle,
            stream: rng.child("fitness"),
            memo: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    /// Noised fitness of each individual. New keys are trained in parallel;
    /// each uses substreams of its key, so results do not depend on scheduling.
    fn fitness(&mut self, population: &[Individual]) -> Result<Vec<f64>> {
        let mut fresh: Vec<&Individual> = Vec::new();
        let mut seen = BTreeSet::new();
        for ind in population {
            if !self.memo.contains_key(&ind.key) && seen.insert(ind.key.as_str()) {
                fresh.push(ind);
            }
        }
        let (space, oracle, stream) = (self.space, self.oracle, &self.stream);
        let scores = fresh
            .par_iter()
            .map(|ind| {
                let s = stream.child(&ind.key);
                let acc = oracle.accuracy(space, ind, &s.child("train"))?;
                noised_fitness(
                    acc,
                    oracle.validation_size(),
                    oracle.eps_prime(),
                    &mut s.child("noise"),
                )
            })
            .collect::<Vec<_>>();
        for (ind, score) in fresh.iter().zip(scores) {
            let score = score.map_err(|e| Error::Fitness {
                key: ind.key.clone(),
                source: Box::new(e),
            })?;
            self.memo.insert(ind.key.clone(), score);
            self.order.push(ind.key.clone());
        }
        Ok(population.iter().map(|i| self.memo[&i.key]).collect())
    }

    fn trainings(&self) -> usize {
        self.order.len()
    }

    fn ledger(&self) -> CompositionLedger {
        let mut ledger = CompositionLedger::new();
        let budget = self.oracle.training_budget();
        let eps_prime = self.oracle.eps_prime();
        for key in &self.order {
            if let Some(b) = budget {
                ledger.record(key.clone(), b.epsilon, b.delta, true);
            }
            if eps_prime.is_finite() {
                ledger.record(format!("validation:{key}"), eps_prime, 0.0, false);
            }
        }
        ledger
    }
}

/// Ranks by fitness descending, ties to the smaller key.
fn rank(population: Vec<Individual>, fitness: Vec<f64>) -> Vec<(Individual, f64)> {
    let mut ranked: Vec<(Individual, f64)> = population.into_iter().zip(fitness).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.key.cmp(&b.0.key)));
    ranked
}

/// Fitness summary of one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub best_key: String,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub size: usize,
}

fn trace_of(ranked: &[(Individual, f64)]) -> GenerationTrace {
    GenerationTrace {
        best_key: ranked[0].0.key.clone(),
        best_fitness: ranked[0].1,
        mean_fitness: ranked.iter().map(|r| r.1).sum::<f64>() / ranked.len() as f64,
        size: ranked.len(),
    }
}

/// Result of any search driver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: Individual,
    pub best_fitness: f64,
    pub generations: Vec<GenerationTrace>,
    /// Distinct architectures trained (equal to the oracle call count).
    pub unique_trainings: usize,
    pub ledger: CompositionLedger,
    /// Workflow ε; `None` when the oracle trains without DP.
    pub total_epsilon: Option<f64>,
    /// Per-generation selection budgets ε′ᵢ (RS and MGRS only).
    pub eps_prime: Vec<f64>,
}

/// Evolve parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveParams {
    pub alpha: f64,
    pub beta: f64,
    pub p_mu: f64,
}

impl Default for EvolveParams {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.1,
            p_mu: 0.2,
        }
    }
}

/// Next generation from a ranked population.
///
/// Parents are the top `round(αN)` plus `round(βN)` drawn at random from the
/// rest. Children are crossovers of two parents picked uniformly (with
/// replacement) until the population is refilled, then each is mutated with
/// probability `p_mu`. With fewer than two parents the children are clones
/// of the best individual, mutated with probability `p_mu`.
pub fn evolve(
    space: &SearchSpace,
    ranked: &[Individual],
    params: &EvolveParams,
    rng: &mut RngStream,
) -> Result<Vec<Individual>> {
    let EvolveParams { alpha, beta, p_mu } = *params;
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) || alpha + beta > 1.0 + 1e-12 {
        return Err(Error::arg(
            "alpha, beta must lie in [0, 1] with alpha + beta <= 1",
        ));
    }
    if !(0.0..=1.0).contains(&p_mu) {
        return Err(Error::arg("p_mu must lie in [0, 1]"));
    }
    if ranked.is_empty() {
        return Err(Error::arg("cannot evolve an empty population"));
    }
    let n = ranked.len();
    let n_alpha = ((alpha * n as f64).round() as usize).min(n);
    let rest = &ranked[n_alpha..];
    let n_beta = ((beta * n as f64).round() as usize).min(rest.len());
    let mut pool: Vec<&Individual> = ranked[..n_alpha].iter().collect();
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, rest.len(), n_beta).into_vec();
    picks.sort_unstable();
    pool.extend(picks.into_iter().map(|i| &rest[i]));

    let mut next = Vec::with_capacity(n);
    if pool.len() < 2 {
        let parent = pool.first().copied().unwrap_or(&ranked[0]);
        next.resize(n, parent.clone());
    } else {
        while next.len() < n {
            let a = pool[rng.index(pool.len())];
            let b = pool[rng.index(pool.len())];
            next.push(crossover(space, a, b, rng)?);
        }
    }
    for child in next.iter_mut() {
        if rng.bernoulli(p_mu) {
            *child = mutate(space, child, rng);
        }
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaasParams {
    pub gens_l: usize,
    pub pop_k: usize,
    #[serde(default)]
    pub evolve: EvolveParams,
    #[serde(default = "default_delta_prime")]
    pub delta_prime: f64,
}

fn default_delta_prime() -> f64 {
    DEFAULT_DELTA_PRIME
}

impl Default for PaasParams {
    fn default() -> Self {
        Self {
            gens_l: 6,
            pop_k: 10,
            evolve: EvolveParams::default(),
            delta_prime: DEFAULT_DELTA_PRIME,
        }
    }
}

/// Genetic architecture search. Returns the best individual of the final generation.
pub fn paas(
    space: &SearchSpace,
    params: &PaasParams,
    oracle: &dyn FitnessOracle,
    rng: &RngStream,
) -> Result<SearchOutcome> {
    if params.pop_k == 0 || params.gens_l == 0 {
        return Err(Error::arg("PAAS needs pop_k >= 1 and gens_l >= 1"));
    }
    let mut search_rng = rng.child("search");
    let mut eval = Evaluator::new(space, oracle, rng);
    let mut population: Vec<Individual> = (0..params.pop_k)
        .map(|_| sample_architecture(space, &mut search_rng))
        .collect();
    let mut generations = Vec::with_capacity(params.gens_l);
    let mut ranked = Vec::new();
    for g in 0..params.gens_l {
        let fitness = eval.fitness(&population)?;
        ranked = rank(population, fitness);
        generations.push(trace_of(&ranked));
        if g + 1 < params.gens_l {
            let order: Vec<Individual> = ranked.iter().map(|r| r.0.clone()).collect();
            population = evolve(space, &order, &params.evolve, &mut search_rng)?;
        } else {
            population = Vec::new();
        }
    }
    let (best, best_fitness) = ranked.swap_remove(0);
    let ledger = eval.ledger();
    let total_epsilon = match oracle.training_budget() {
        Some(b) => Some(advanced_composition(
            b.epsilon,
            ledger.unique_trainings(),
            params.delta_prime,
        )?),
        None => None,
    };
    Ok(SearchOutcome {
        best,
        best_fitness,
        generations,
        unique_trainings: eval.trainings(),
        ledger,
        total_epsilon,
        eps_prime: Vec::new(),
    })
}

/// Accounting parameters of the RS selection condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsAccounting {
    /// Acceptable loss proportion.
    pub x: f64,
    /// Probability of missing the target accuracy.
    pub delta_fail: f64,
}

impl Default for RsAccounting {
    fn default() -> Self {
        Self {
            x: 0.05,
            delta_fail: 1e-4,
        }
    }
}

/// Multi-generation random search.
///
/// Generation 1 samples `gen_sizes[0]` architectures uniformly. Each later
/// member is, with probability `p_mutate`, a mutation of the best
/// architecture found so far, otherwise a fresh uniform sample. The budget is
/// `ε_train + Σ 8ε′ᵢ` with `ε′ᵢ` from the RS condition at `k = gen_sizes[i]`.
pub fn mgrs(
    space: &SearchSpace,
    gen_sizes: &[usize],
    p_mutate: f64,
    oracle: &dyn FitnessOracle,
    accounting: &RsAccounting,
    rng: &RngStream,
) -> Result<SearchOutcome> {
    if gen_sizes.is_empty() || gen_sizes.contains(&0) {
        return Err(Error::arg("generation sizes must be nonempty and positive"));
    }
    if !(0.0..=1.0).contains(&p_mutate) {
        return Err(Error::arg("p_mutate must lie in [0, 1]"));
    }
    let mut search_rng = rng.child("search");
    let mut eval = Evaluator::new(space, oracle, rng);
    let mut generations = Vec::with_capacity(gen_sizes.len());
    let mut best: Option<(Individual, f64)> = None;
    for (g, &k) in gen_sizes.iter().enumerate() {
        let population: Vec<Individual> = (0..k)
            .map(|_| match &best {
                Some((b, _)) if g > 0 && search_rng.bernoulli(p_mutate) => {
                    mutate(space, b, &mut search_rng)
                }
                _ => sample_architecture(space, &mut search_rng),
            })
            .collect();
        let fitness = eval.fitness(&population)?;
        let ranked = rank(population, fitness);
        generations.push(trace_of(&ranked));
        let top = &ranked[0];
        let better = match &best {
            None => true,
            Some((b, f)) => top.1 > *f || (top.1 == *f && top.0.key < b.key),
        };
        if better {
            best = Some(top.clone());
        }
    }
    let (best, best_fitness) = best.expect("at least one generation");
    let (total_epsilon, eps_prime) = match oracle.training_budget() {
        Some(b) => {
            let budget = mgrs_workflow_budget(
                b.epsilon,
                accounting.x,
                oracle.validation_size(),
                gen_sizes,
                accounting.delta_fail,
            )?;
            (Some(budget.total), budget.eps_prime)
        }
        None => {
            let eps = gen_sizes
                .iter()
                .map(|&k| {
                    rs_epsilon_prime(
                        accounting.x,
                        oracle.validation_size(),
                        k,
                        accounting.delta_fail,
                    )
                })
                .collect::<Result<Vec<_>>>()
                .unwrap_or_default();
            (None, eps)
        }
    };
    Ok(SearchOutcome {
        best,
        best_fitness,
        generations,
        unique_trainings: eval.trainings(),
        ledger: eval.ledger(),
        total_epsilon,
        eps_prime,
    })
}

/// Random search: best of `k` independent uniform samples (MGRS with one generation).
pub fn rs_search(
    space: &SearchSpace,
    k: usize,
    oracle: &dyn FitnessOracle,
    accounting: &RsAccounting,
    rng: &RngStream,
) -> Result<SearchOutcome> {
    mgrs(space, &[k], 0.0, oracle, accounting, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::derive_stream;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn space45() -> SearchSpace {
        SearchSpace::from_toml_str(
            "num_layers = [1, 2, 3]\nunits = [8, 16, 32, 64, 128]\nactivation = [\"relu\", \"sigmoid\", \"tanh\"]\n",
        )
        .unwrap()
    }

    /// Deterministic fitness with a unique maximum at a fixed gene vector.
    struct Planted {
        target: Vec<usize>,
        calls: AtomicUsize,
        eps_prime: f64,
    }

    impl FitnessOracle for Planted {
        fn accuracy(&self, _: &SearchSpace, ind: &Individual, _: &RngStream) -> Result<f64> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let d: usize = ind
                .genes
                .iter()
                .zip(&self.target)
                .map(|(a, b)| a.abs_diff(*b))
                .sum();
            Ok(1.0 - 0.1 * d as f64)
        }
        fn validation_size(&self) -> usize {
            5000
        }
        fn eps_prime(&self) -> f64 {
            self.eps_prime
        }
        fn training_budget(&self) -> Option<PrivacyBudget> {
            Some(PrivacyBudget {
                epsilon: 0.5,
                delta: 1e-5,
            })
        }
    }

    fn planted(eps_prime: f64) -> Planted {
        Planted {
            target: vec![2, 1, 3],
            calls: AtomicUsize::new(0),
            eps_prime,
        }
    }

    #[test]
    fn space_basics() {
        let s = space45();
        assert_eq!(s.size(), 45);
        assert_eq!(s.enumerate().len(), 45);
        let keys: BTreeSet<String> = s.enumerate().into_iter().map(|i| i.key).collect();
        assert_eq!(keys.len(), 45);
        assert!(SearchSpace::from_toml_str("a = []").is_err());
        assert!(SearchSpace::from_toml_str("a = 3").is_err());
    }

    #[test]
    fn singleton_space_and_determinism() {
        let s =
            SearchSpace::from_toml_str("num_layers = [2]\nunits = [4]\nactivation = [\"tanh\"]")
                .unwrap();
        let mut r = derive_stream(1, "s");
        let a = sample_architecture(&s, &mut r);
        assert_eq!(a.genes, vec![0, 0, 0]);
        assert_eq!(mutate(&s, &a, &mut r), a);
        let s = space45();
        let x = sample_architecture(&s, &mut derive_stream(2, "s"));
        let y = sample_architecture(&s, &mut derive_stream(2, "s"));
        assert_eq!(x, y);
    }

    #[test]
    fn sampling_frequencies() {
        let s = space45();
        let mut r = derive_stream(3, "f");
        let trials = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            counts[sample_architecture(&s, &mut r).genes[1]] += 1;
        }
        let se = (1.0 / 3.0 * 2.0 / 3.0 / trials as f64).sqrt();
        for c in counts {
            assert!((c as f64 / trials as f64 - 1.0 / 3.0).abs() < 4.0 * se);
        }
    }

    #[test]
    fn crossover_and_mutation_rules() {
        let s = space45();
        let mut r = derive_stream(4, "x");
        let a = s.individual(vec![0, 1, 2]).unwrap();
        let b = s.individual(vec![0, 1, 4]).unwrap();
        assert_eq!(crossover(&s, &a, &a, &mut r).unwrap(), a);
        for _ in 0..20 {
            let c = crossover(&s, &a, &b, &mut r).unwrap();
            assert!(c == a || c == b);
        }
        let trials = 10_000;
        let c2 = s.individual(vec![2, 0, 4]).unwrap();
        let from_a = (0..trials)
            .filter(|_| crossover(&s, &a, &c2, &mut r).unwrap().genes[2] == a.genes[2])
            .count();
        assert!((from_a as f64 / trials as f64 - 0.5).abs() < 0.02);

        let mut picked = [0usize; 3];
        for _ in 0..trials {
            let m = mutate(&s, &c2, &mut r);
            let diff: Vec<usize> = (0..3).filter(|&i| m.genes[i] != c2.genes[i]).collect();
            assert!(diff.len() <= 1);
            if let Some(&i) = diff.first() {
                picked[i] += 1;
            }
        }
        // Gene i changes with probability (1/3) * (1 - 1/|values_i|).
        for (i, card) in [3.0, 3.0, 5.0].iter().enumerate() {
            let p = (1.0 / 3.0) * (1.0 - 1.0 / card);
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            assert!(
                (picked[i] as f64 / trials as f64 - p).abs() < 4.0 * se,
                "{i}"
            );
        }
    }

    #[test]
    fn evolve_sizes_and_closure() {
        let s = space45();
        let mut r = derive_stream(5, "e");
        let pop: Vec<Individual> = (0..10).map(|_| sample_architecture(&s, &mut r)).collect();
        let params = EvolveParams {
            alpha: 0.4,
            beta: 0.1,
            p_mu: 0.0,
        };
        let next = evolve(&s, &pop, &params, &mut r).unwrap();
        assert_eq!(next.len(), 10);
        for child in &next {
            for (i, g) in child.genes.iter().enumerate() {
                assert!(pop.iter().any(|p| p.genes[i] == *g));
            }
        }
        let same = vec![pop[0].clone(); 6];
        for child in evolve(&s, &same, &params, &mut r).unwrap() {
            assert_eq!(child, pop[0]);
        }
        let bad = EvolveParams {
            alpha: 0.8,
            beta: 0.5,
            p_mu: 0.0,
        };
        assert!(evolve(&s, &pop, &bad, &mut r).is_err());
    }

    #[test]
    fn noised_fitness_limits() {
        let mut r = derive_stream(6, "n");
        assert_eq!(
            noised_fitness(0.9, 5000, f64::INFINITY, &mut r).unwrap(),
            0.9
        );
        let a = noised_fitness(0.9, 5000, 0.02, &mut derive_stream(7, "n")).unwrap();
        let b = noised_fitness(0.9, 5000, 0.02, &mut derive_stream(7, "n")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn paas_single_member() {
        let s = space45();
        let o = planted(f64::INFINITY);
        let p = PaasParams {
            gens_l: 1,
            pop_k: 1,
            ..PaasParams::default()
        };
        let rng = derive_stream(8, "p");
        let out = paas(&s, &p, &o, &rng).unwrap();
        let expected = sample_architecture(&s, &mut rng.child("search"));
        assert_eq!(out.best, expected);
        assert_eq!(out.unique_trainings, 1);
        assert_eq!(o.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn paas_memoizes_and_accounts() {
        let s = space45();
        let o = planted(0.02);
        let out = paas(&s, &PaasParams::default(), &o, &derive_stream(9, "p")).unwrap();
        assert_eq!(o.calls.load(Ordering::SeqCst), out.unique_trainings);
        assert!(out.unique_trainings <= 60);
        assert_eq!(out.generations.len(), 6);
        assert!(out.generations.iter().all(|g| g.size == 10));
        assert_eq!(out.ledger.unique_trainings(), out.unique_trainings);
        assert_eq!(
            out.total_epsilon.unwrap(),
            advanced_composition(0.5, out.unique_trainings, 1e-6).unwrap()
        );
    }

    #[test]
    fn searches_are_deterministic_per_seed() {
        let s = space45();
        let run = || {
            let o = planted(0.02);
            let a = paas(&s, &PaasParams::default(), &o, &derive_stream(10, "p")).unwrap();
            let b = mgrs(
                &s,
                &[8, 4, 2],
                0.7,
                &o,
                &RsAccounting::default(),
                &derive_stream(10, "m"),
            )
            .unwrap();
            (a, b)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rs_and_single_generation_mgrs_agree() {
        let s = space45();
        let acc = RsAccounting {
            x: 0.0227,
            delta_fail: 1e-4,
        };
        let a = rs_search(
            &s,
            7,
            &planted(f64::INFINITY),
            &acc,
            &derive_stream(11, "r"),
        )
        .unwrap();
        let b = mgrs(
            &s,
            &[7],
            0.7,
            &planted(f64::INFINITY),
            &acc,
            &derive_stream(11, "r"),
        )
        .unwrap();
        assert_eq!(a, b);
        let one = rs_search(
            &s,
            1,
            &planted(f64::INFINITY),
            &acc,
            &derive_stream(12, "r"),
        )
        .unwrap();
        assert_eq!(one.unique_trainings, 1);
        assert_eq!(one.eps_prime.len(), 1);
    }

    #[test]
    fn realizer_builds_fcns_and_rejects_cnn_spaces() {
        let s = SearchSpace::from_toml_str(
            "num_layers = [1, 2, 3]\nunits_1 = [64, 128]\nunits_2 = [64]\nunits_3 = [10]\n\
             activation_1 = [\"relu\"]\nactivation_2 = [\"sigmoid\"]\nactivation_3 = [\"tanh\"]\ntrainable_1 = [false]\n",
        )
        .unwrap();
        let r = Realizer {
            input_dim: 300,
            task: Task::Classification { classes: 10 },
            dropout: 0.2,
        };
        r.check_space(&s).unwrap();
        let ind = s
            .enumerate()
            .into_iter()
            .find(|i| s.value(i, "num_layers") == Some(&GeneValue::Int(3)))
            .unwrap();
        let a = r.realize(&s, &ind).unwrap();
        assert_eq!(a.layers.len(), 4);
        assert_eq!(a.layers[0].units, 64);
        assert!(!a.layers[0].trainable);
        assert_eq!(a.layers[2].activation, Activation::Tanh);
        assert_eq!(a.layers[1].dropout_after, 0.2);

        let cnn = SearchSpace::from_toml_str("num_basic_blocks = [2, 3]\nfilters_1 = [16, 32, 48]")
            .unwrap();
        assert!(matches!(r.check_space(&cnn), Err(Error::Config(_))));
    }

    #[test]
    fn default_space_realizes() {
        let s = default_fcn_space(true);
        assert_eq!(s.size(), 3 * 5 * 3 * 4 * 27 * 8);
        let r = Realizer {
            input_dim: 108,
            task: Task::Classification { classes: 2 },
            dropout: 0.2,
        };
        r.check_space(&s).unwrap();
        let mut rng = derive_stream(14, "d");
        for _ in 0..20 {
            let ind = sample_architecture(&s, &mut rng);
            let a = r.realize(&s, &ind).unwrap();
            let GeneValue::Int(l) = s.value(&ind, "num_layers").unwrap() else {
                panic!()
            };
            assert_eq!(a.layers.len(), *l as usize + 1);
        }
    }

    #[test]
    fn training_oracle_runs() {
        use crate::data::{split, synthetic_sum_dataset, Split};
        use crate::models::Loss;
        let ds = synthetic_sum_dataset(300, 4, 1, &derive_stream(13, "d")).unwrap();
        let ds = split(&ds, [0.7, 0.3, 0.0], &mut derive_stream(13, "s")).unwrap();
        let cfg = TrainConfig::sgd(0.1, 10, 2, Loss::CategoricalXent).with_dp(1.0, 1.0);
        let oracle = TrainingOracle::new(
            ds.part(Split::Train),
            ds.part(Split::Val),
            Realizer {
                input_dim: 4,
                task: Task::Classification { classes: 2 },
                dropout: 0.0,
            },
            cfg,
            1.0,
        )
        .unwrap();
        let s =
            SearchSpace::from_toml_str("num_layers = [1]\nunits = [4, 8]\nactivation = [\"relu\"]")
                .unwrap();
        let out = rs_search(
            &s,
            3,
            &oracle,
            &RsAccounting {
                x: 0.5,
                delta_fail: 0.01,
            },
            &derive_stream(13, "rs"),
        )
        .unwrap();
        assert!(out.total_epsilon.unwrap() > oracle.training_budget().unwrap().epsilon);
        assert!(out.unique_trainings <= 2);
    }
}
