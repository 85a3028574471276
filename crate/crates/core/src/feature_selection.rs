//! Correlation-based feature selection (CFS) with greedy and genetic search,
//! DP-noised entropies, and PAFS, a genetic search whose fitness is the
//! accuracy of a DP-trained model.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{pafs_total_budget, DEFAULT_DELTA_PRIME};
use crate::data::{ColumnKind, Dataset, Labels};
use crate::error::{Error, Result};
use crate::numerics::{entropy, sample_laplace, RngStream};

/// Number of equal-frequency bins used for numeric columns.
pub const NUMERIC_BINS: usize = 10;

/// Sorted, duplicate-free feature indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureSet(Vec<usize>);

impl FeatureSet {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    /// All indices `0..m`.
    pub fn all(m: usize) -> Self {
        Self((0..m).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_range(&self, m: usize) -> Result<()> {
        match self.0.last() {
            Some(&i) if i >= m => Err(Error::arg(format!("feature {i} out of range {m}"))),
            _ => Ok(()),
        }
    }

    /// Canonical memoization key.
    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Dense codes `0..card` for one column.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteColumn {
    pub codes: Vec<u32>,
    pub card: u32,
}

impl DiscreteColumn {
    /// Relabels arbitrary codes densely in first-seen order.
    pub fn from_codes(raw: &[u32]) -> Self {
        let mut map = BTreeMap::new();
        let mut next = 0u32;
        let codes = raw
            .iter()
            .map(|c| {
                *map.entry(*c).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        Self { codes, card: next }
    }

    /// Equal-frequency binning: a value's bin is `floor(bins * #{smaller values} / n)`,
    /// so ties always share a bin.
    pub fn equal_frequency(values: &[f64], bins: usize) -> Self {
        let n = values.len();
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let raw: Vec<u32> = values
            .iter()
            .map(|v| {
                let below = sorted.partition_point(|s| s.total_cmp(v).is_lt());
                ((below * bins) / n.max(1)).min(bins - 1) as u32
            })
            .collect();
        Self::from_codes(&raw)
    }
}

/// Discretized features and label.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub features: Vec<DiscreteColumn>,
    pub label: DiscreteColumn,
}

impl Discretized {
    pub fn n(&self) -> usize {
        self.label.codes.len()
    }
}

/// Categorical columns keep their codes; numeric columns and real labels are
/// binned into [`NUMERIC_BINS`] equal-frequency bins.
pub fn discretize(ds: &Dataset) -> Result<Discretized> {
    if ds.n() == 0 {
        return Err(Error::arg("cannot discretize an empty dataset"));
    }
    let features = ds
        .columns
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let col = ds.x.column(j);
            match c.kind {
                ColumnKind::Categorical => {
                    DiscreteColumn::from_codes(&col.iter().map(|v| *v as u32).collect::<Vec<_>>())
                }
                ColumnKind::Numeric => DiscreteColumn::equal_frequency(&col, NUMERIC_BINS),
            }
        })
        .collect();
    let label = match &ds.y {
        Labels::Class { values, .. } => {
            DiscreteColumn::from_codes(&values.iter().map(|&v| v as u32).collect::<Vec<_>>())
        }
        Labels::Real(v) => DiscreteColumn::equal_frequency(v, NUMERIC_BINS),
    };
    Ok(Discretized { features, label })
}

fn entropies(x: &DiscreteColumn, y: &DiscreteColumn) -> Result<(f64, f64, f64)> {
    if x.codes.len() != y.codes.len() {
        return Err(Error::DimensionMismatch {
            expected: x.codes.len(),
            got: y.codes.len(),
        });
    }
    if x.codes.is_empty() {
        return Err(Error::arg("suc of empty columns"));
    }
    let (cx, cy) = (x.card as usize, y.card as usize);
    let mut joint = vec![0u64; cx * cy];
    let mut hx = vec![0u64; cx];
    let mut hy = vec![0u64; cy];
    for (&a, &b) in x.codes.iter().zip(&y.codes) {
        joint[a as usize * cy + b as usize] += 1;
        hx[a as usize] += 1;
        hy[b as usize] += 1;
    }
    Ok((entropy(&hx)?, entropy(&hy)?, entropy(&joint)?))
}

fn suc_formula(hx: f64, hy: f64, hxy: f64) -> f64 {
    let denom = hx + hy;
    if denom <= 0.0 {
        return 0.0;
    }
    (2.0 * (1.0 - hxy / denom)).clamp(0.0, 1.0)
}

/// Symmetrical uncertainty `2 (1 - H(x,y) / (H(x) + H(y)))`; 0 when both columns are constant.
pub fn suc(x: &DiscreteColumn, y: &DiscreteColumn) -> Result<f64> {
    let (hx, hy, hxy) = entropies(x, y)?;
    Ok(suc_formula(hx, hy, hxy))
}

/// Sensitivity bound `(2/n) log2 n` of a plug-in entropy under add/remove-one.
pub fn entropy_sensitivity(n: usize) -> f64 {
    let n = n as f64;
    2.0 * n.log2() / n
}

/// SUC from entropies each perturbed with `Lap(Δ_H / eps_h)`, clamped to `[0, 1]`.
pub fn suc_dp(
    x: &DiscreteColumn,
    y: &DiscreteColumn,
    eps_h: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if !(eps_h > 0.0) {
        return Err(Error::arg("eps_h must be > 0"));
    }
    let (hx, hy, hxy) = entropies(x, y)?;
    let sens = entropy_sensitivity(x.codes.len());
    if eps_h.is_infinite() || sens == 0.0 {
        return Ok(suc_formula(hx, hy, hxy));
    }
    let scale = sens / eps_h;
    let hx = hx + sample_laplace(rng, scale)?;
    let hy = hy + sample_laplace(rng, scale)?;
    let hxy = hxy + sample_laplace(rng, scale)?;
    Ok(suc_formula(hx, hy, hxy))
}

/// Feature-label and feature-feature SUC values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SucTable {
    pub corr_y: Vec<f64>,
    /// Row-major `m x m`, symmetric with unit diagonal.
    pub corr: Vec<f64>,
    pub dp_eps: Option<f64>,
}

impl SucTable {
    /// Exact table; pairs are computed in parallel.
    pub fn build(data: &Discretized) -> Result<Self> {
        let m = data.features.len();
        let corr_y = data
            .features
            .par_iter()
            .map(|f| suc(f, &data.label))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(usize, usize)> = (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .collect();
        let values = pairs
            .par_iter()
            .map(|&(i, j)| suc(&data.features[i], &data.features[j]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(m, corr_y, &pairs, &values, None))
    }

    /// Table with DP-noised entropies. Each entry uses its own substream of `rng`,
    /// so the result does not depend on evaluation order.
    pub fn build_dp(data: &Discretized, eps_h: f64, rng: &RngStream) -> Result<Self> {
        let m = data.features.len();
        let corr_y = data
            .features
            .par_iter()
            .enumerate()
            .map(|(i, f)| suc_dp(f, &data.label, eps_h, &mut rng.child(format!("suc/y/{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let pairs: Vec<(usize, usize)> = (0..m)
            .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
            .collect();
        let values = pairs
            .par_iter()
            .map(|&(i, j)| {
                suc_dp(
                    &data.features[i],
                    &data.features[j],
                    eps_h,
                    &mut rng.child(format!("suc/{i}/{j}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(m, corr_y, &pairs, &values, Some(eps_h)))
    }

    fn assemble(
        m: usize,
        corr_y: Vec<f64>,
        pairs: &[(usize, usize)],
        values: &[f64],
        dp_eps: Option<f64>,
    ) -> Self {
        let mut corr = vec![0.0; m * m];
        for i in 0..m {
            corr[i * m + i] = 1.0;
        }
        for (&(i, j), &v) in pairs.iter().zip(values) {
            corr[i * m + j] = v;
            corr[j * m + i] = v;
        }
        Self {
            corr_y,
            corr,
            dp_eps,
        }
    }

    pub fn m(&self) -> usize {
        self.corr_y.len()
    }

    pub fn pair(&self, i: usize, j: usize) -> f64 {
        self.corr[i * self.m() + j]
    }
}

/// `k corr_y / sqrt(k + k(k-1) corr)` with mean feature-label and mean pairwise SUC.
pub fn merit(s: &FeatureSet, table: &SucTable) -> Result<f64> {
    if s.is_empty() {
        return Err(Error::arg("merit of an empty feature set"));
    }
    s.check_range(table.m())?;
    let idx = s.indices();
    let k = idx.len() as f64;
    let corr_y = idx.iter().map(|&i| table.corr_y[i]).sum::<f64>() / k;
    let corr = if idx.len() == 1 {
        1.0
    } else {
        let mut total = 0.0;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                total += table.pair(i, j);
            }
        }
        total / (k * (k - 1.0) / 2.0)
    };
    Ok(k * corr_y / (k + k * (k - 1.0) * corr).sqrt())
}

/// Adds the merit-maximizing feature until `k` are selected; ties go to the lower index.
pub fn cfs_greedy(candidates: &FeatureSet, k: usize, table: &SucTable) -> Result<FeatureSet> {
    if k > candidates.len() {
        return Err(Error::arg(format!(
            "k = {k} exceeds {} candidates",
            candidates.len()
        )));
    }
    candidates.check_range(table.m())?;
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    while chosen.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for &f in candidates.indices() {
            if chosen.contains(&f) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(f);
            let score = merit(&FeatureSet::new(trial), table)?;
            if best.map_or(true, |(b, _)| score > b) {
                best = Some((score, f));
            }
        }
        chosen.push(best.expect("k <= |candidates|").1);
    }
    Ok(FeatureSet::new(chosen))
}

/// Parameters of the genetic subset search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaParams {
    pub pop_k: usize,
    pub gens_l: usize,
    pub alpha: f64,
    pub p_co: f64,
    pub p_mu: f64,
}

impl GaParams {
    pub fn validate(&self) -> Result<()> {
        if self.pop_k == 0 || self.gens_l == 0 {
            return Err(Error::arg(
                "population size and generation count must be >= 1",
            ));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::arg("alpha must lie in (0, 1]"));
        }
        if !(self.p_co >= 0.0 && self.p_mu >= 0.0 && self.p_co + self.p_mu <= 1.0 + 1e-12) {
            return Err(Error::arg(
                "p_co and p_mu must be >= 0 with p_co + p_mu <= 1",
            ));
        }
        Ok(())
    }
}

/// Outcome of a genetic subset search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub best: FeatureSet,
    pub best_fitness: f64,
    /// Best fitness of each ranked generation.
    pub trace: Vec<f64>,
}

type Gene = Vec<bool>;

fn gene_to_set(gene: &Gene, candidates: &FeatureSet) -> FeatureSet {
    FeatureSet::new(
        gene.iter()
            .zip(candidates.indices())
            .filter(|(on, _)| **on)
            .map(|(_, &f)| f)
            .collect(),
    )
}

fn random_gene(len: usize, rng: &mut RngStream) -> Gene {
    loop {
        let g: Gene = (0..len).map(|_| rng.bernoulli(0.5)).collect();
        if g.iter().any(|&b| b) {
            return g;
        }
    }
}

/// Genetic loop shared by CFS-GA and PAFS.
///
/// Each generation is ranked by fitness (ties to the smaller feature set key),
/// the top `round(alpha * k)` (at least one) become parents, and the next
/// population starts with the best parent unchanged (elitism) followed by
/// children: crossover of two distinct parents with probability `p_co`
/// (single cut point), a one-bit flip of the first with probability `p_mu`,
/// otherwise a copy of the first. Empty subsets score 0 without evaluation.
/// `eval` receives the distinct unevaluated subsets of a generation in
/// canonical order.
fn genetic_search(
    candidates: &FeatureSet,
    params: &GaParams,
    rng: &mut RngStream,
    eval: &mut dyn FnMut(&[FeatureSet]) -> Result<Vec<f64>>,
) -> Result<GaResult> {
    params.validate()?;
    if candidates.is_empty() {
        return Err(Error::arg("no candidate features"));
    }
    let len = candidates.len();
    let mut cache: BTreeMap<FeatureSet, f64> = BTreeMap::new();
    let mut population: Vec<Gene> = (0..params.pop_k).map(|_| random_gene(len, rng)).collect();
    let n_parents = ((params.alpha * params.pop_k as f64).round() as usize).clamp(1, params.pop_k);
    let mut trace = Vec::with_capacity(params.gens_l);
    let mut ranked: Vec<(f64, FeatureSet, Gene)> = Vec::new();

    for generation in 0..params.gens_l {
        let sets: Vec<FeatureSet> = population
            .iter()
            .map(|g| gene_to_set(g, candidates))
            .collect();
        let fresh: Vec<FeatureSet> = sets
            .iter()
            .filter(|s| !s.is_empty() && !cache.contains_key(*s))
            .cloned()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if !fresh.is_empty() {
            let scores = eval(&fresh)?;
            cache.extend(fresh.into_iter().zip(scores));
        }
        ranked = population
            .iter()
            .zip(sets)
            .map(|(g, s)| {
                let f = if s.is_empty() { 0.0 } else { cache[&s] };
                (f, s, g.clone())
            })
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        trace.push(ranked[0].0);
        if generation + 1 == params.gens_l {
            break;
        }

        let parents: Vec<&Gene> = ranked.iter().take(n_parents).map(|r| &r.2).collect();
        let mut next = Vec::with_capacity(params.pop_k);
        next.push(parents[0].clone());
        while next.len() < params.pop_k {
            let a = rng.index(parents.len());
            let b = if parents.len() > 1 {
                (a + 1 + rng.index(parents.len() - 1)) % parents.len()
            } else {
                a
            };
            let u = rng.uniform();
            let child = if u < params.p_co {
                let cut = if len > 1 { 1 + rng.index(len - 1) } else { len };
                parents[a][..cut]
                    .iter()
                    .chain(&parents[b][cut..])
                    .copied()
                    .collect()
            } else if u < params.p_co + params.p_mu {
                let mut g = parents[a].clone();
                let bit = rng.index(len);
                g[bit] = !g[bit];
                g
            } else {
                parents[a].clone()
            };
            next.push(child);
        }
        population = next;
    }
    let (best_fitness, best, _) = ranked.swap_remove(0);
    Ok(GaResult {
        best,
        best_fitness,
        trace,
    })
}

/// Genetic CFS with merit as fitness.
pub fn cfs_ga(
    candidates: &FeatureSet,
    params: &GaParams,
    table: &SucTable,
    rng: &mut RngStream,
) -> Result<GaResult> {
    candidates.check_range(table.m())?;
    genetic_search(candidates, params, rng, &mut |sets| {
        sets.iter().map(|s| merit(s, table)).collect()
    })
}

/// PAFS settings: GA parameters plus the per-training budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PafsParams {
    pub ga: GaParams,
    pub eps_per_training: f64,
    pub delta_prime: f64,
}

impl Default for PafsParams {
    fn default() -> Self {
        Self {
            ga: GaParams {
                pop_k: 600,
                gens_l: 10,
                alpha: 0.4,
                p_co: 0.5,
                p_mu: 0.3,
            },
            eps_per_training: 0.1,
            delta_prime: DEFAULT_DELTA_PRIME,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PafsResult {
    pub search: GaResult,
    /// Number of fitness (training) invocations, equal to the distinct subsets evaluated.
    pub unique_trainings: usize,
    pub total_epsilon: f64,
}

/// Genetic search whose fitness trains a DP model on each subset.
///
/// Every distinct subset is trained once; subsets of one generation train in
/// parallel on the current rayon pool. A failing fitness call aborts the
/// search with the subset attached.
pub fn pafs<F>(
    candidates: &FeatureSet,
    params: &PafsParams,
    fitness: F,
    rng: &mut RngStream,
) -> Result<PafsResult>
where
    F: Fn(&FeatureSet) -> Result<f64> + Sync,
{
    let mut calls = 0usize;
    let search = genetic_search(candidates, &params.ga, rng, &mut |sets| {
        calls += sets.len();
        sets.par_iter()
            .map(|s| {
                fitness(s).map_err(|e| Error::Fitness {
                    key: s.key(),
                    source: Box::new(e),
                })
            })
            .collect()
    })?;
    Ok(PafsResult {
        search,
        unique_trainings: calls,
        total_epsilon: pafs_total_budget(params.eps_per_training, calls, params.delta_prime)?,
    })
}

/// Uniform subset of `size` candidates without replacement.
pub fn random_subset(
    candidates: &FeatureSet,
    size: usize,
    rng: &mut RngStream,
) -> Result<FeatureSet> {
    if size > candidates.len() {
        return Err(Error::arg(format!(
            "size {size} exceeds {} candidates",
            candidates.len()
        )));
    }
    let picks = rand::seq::index::sample(rng, candidates.len(), size);
    Ok(FeatureSet::new(
        picks.into_iter().map(|i| candidates.indices()[i]).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::derive_stream;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn col(codes: &[u32]) -> DiscreteColumn {
        DiscreteColumn::from_codes(codes)
    }

    #[test]
    fn suc_examples() {
        let x = col(&[0, 1, 0, 1, 1, 0]);
        assert_eq!(suc(&x, &x).unwrap(), 1.0);
        let a = col(&[0, 0, 1, 1]);
        let b = col(&[0, 1, 0, 1]);
        assert_eq!(suc(&a, &b).unwrap(), 0.0);
        let x4 = col(&[0, 1, 2, 3, 0, 1, 2, 3]);
        let y2 = col(&[0, 1, 0, 1, 0, 1, 0, 1]);
        assert!((suc(&x4, &y2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((suc(&y2, &x4).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let c = col(&[5, 5, 5]);
        assert_eq!(suc(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn equal_frequency_bins() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        let d = DiscreteColumn::equal_frequency(&v, 10);
        assert_eq!(d.card, 10);
        for b in 0..10u32 {
            assert_eq!(d.codes.iter().filter(|&&c| c == b).count(), 10);
        }
        let ties = DiscreteColumn::equal_frequency(&[1.0, 1.0, 1.0, 2.0], 10);
        assert_eq!(ties.codes[0], ties.codes[2]);
        assert_ne!(ties.codes[0], ties.codes[3]);
    }

    #[test]
    fn suc_dp_limits_and_determinism() {
        let x = col(&[0, 1, 1, 0, 1, 0, 0, 1]);
        let y = col(&[0, 1, 0, 0, 1, 1, 0, 1]);
        let exact = suc(&x, &y).unwrap();
        let mut r = derive_stream(1, "h");
        assert_eq!(suc_dp(&x, &y, f64::INFINITY, &mut r).unwrap(), exact);
        let a = suc_dp(&x, &y, 0.5, &mut derive_stream(2, "h")).unwrap();
        let b = suc_dp(&x, &y, 0.5, &mut derive_stream(2, "h")).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a));
        assert!(suc_dp(&x, &y, 0.0, &mut r).is_err());
    }

    /// Reference mean and standard deviation from a 10^7-sample independent
    /// simulation of the clamped noisy SUC for x = y, balanced binary, n = 200,
    /// eps_h = 0.1: 0.6262 and 0.4437.
    #[test]
    fn suc_dp_identical_binary_columns_mean() {
        let codes: Vec<u32> = (0..200).map(|i| i % 2).collect();
        let x = col(&codes);
        let mut r = derive_stream(3, "mc");
        let trials = 10_000;
        let mean = (0..trials)
            .map(|_| suc_dp(&x, &x, 0.1, &mut r).unwrap())
            .sum::<f64>()
            / trials as f64;
        assert!((mean - 0.6262).abs() < 0.02, "{mean}");
    }

    fn table(corr_y: &[f64], pairs: &[(usize, usize, f64)]) -> SucTable {
        let m = corr_y.len();
        let mut corr = vec![0.0; m * m];
        for i in 0..m {
            corr[i * m + i] = 1.0;
        }
        for &(i, j, v) in pairs {
            corr[i * m + j] = v;
            corr[j * m + i] = v;
        }
        SucTable {
            corr_y: corr_y.to_vec(),
            corr,
            dp_eps: None,
        }
    }

    #[test]
    fn merit_examples() {
        let t = table(&[0.7, 0.5, 0.5], &[(1, 2, 1.0)]);
        assert_eq!(merit(&FeatureSet::new(vec![0]), &t).unwrap(), 0.7);
        assert!((merit(&FeatureSet::new(vec![1, 2]), &t).unwrap() - 0.5).abs() < 1e-15);
        let t = table(&[0.5, 0.5], &[(0, 1, 0.0)]);
        assert!((merit(&FeatureSet::new(vec![0, 1]), &t).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(merit(&FeatureSet::new(vec![]), &t).is_err());
    }

    #[test]
    fn greedy_picks_best_and_nests() {
        let t = table(
            &[0.1, 0.2, 0.9, 0.3, 0.25],
            &[(2, 3, 0.8), (1, 3, 0.1), (2, 4, 0.05)],
        );
        let c = FeatureSet::all(5);
        assert_eq!(cfs_greedy(&c, 1, &t).unwrap(), FeatureSet::new(vec![2]));
        let mut prev = FeatureSet::new(vec![]);
        for k in 1..=5 {
            let s = cfs_greedy(&c, k, &t).unwrap();
            assert_eq!(s.len(), k);
            assert!(prev.indices().iter().all(|i| s.indices().contains(i)));
            prev = s;
        }
        assert_eq!(prev, c);
        assert!(cfs_greedy(&c, 6, &t).is_err());
    }

    #[test]
    fn ga_single_member_returns_its_subset() {
        let t = table(&[0.1, 0.2, 0.3], &[]);
        let p = GaParams {
            pop_k: 1,
            gens_l: 1,
            alpha: 1.0,
            p_co: 0.5,
            p_mu: 0.5,
        };
        let mut r = derive_stream(4, "ga");
        let res = cfs_ga(&FeatureSet::all(3), &p, &t, &mut r).unwrap();
        let mut r2 = derive_stream(4, "ga");
        let expected = gene_to_set(&random_gene(3, &mut r2), &FeatureSet::all(3));
        assert_eq!(res.best, expected);
    }

    #[test]
    fn ga_best_merit_is_monotone_and_validated() {
        let t = table(
            &[0.1, 0.6, 0.2, 0.55, 0.3, 0.05],
            &[(1, 3, 0.2), (0, 2, 0.9), (4, 5, 0.4)],
        );
        let p = GaParams {
            pop_k: 8,
            gens_l: 12,
            alpha: 0.5,
            p_co: 0.5,
            p_mu: 0.3,
        };
        let res = cfs_ga(&FeatureSet::all(6), &p, &t, &mut derive_stream(5, "ga")).unwrap();
        for w in res.trace.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let bad = GaParams { p_co: 0.8, ..p };
        assert!(cfs_ga(&FeatureSet::all(6), &bad, &t, &mut derive_stream(5, "ga")).is_err());
    }

    #[test]
    fn pafs_memoizes_and_accounts() {
        let calls = AtomicUsize::new(0);
        let fitness = |s: &FeatureSet| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(s.indices()
                .iter()
                .map(|&i| if i % 2 == 0 { 0.1 } else { -0.05 })
                .sum::<f64>())
        };
        let params = PafsParams {
            ga: GaParams {
                pop_k: 10,
                gens_l: 5,
                alpha: 0.4,
                p_co: 0.5,
                p_mu: 0.3,
            },
            ..PafsParams::default()
        };
        let res = pafs(
            &FeatureSet::all(4),
            &params,
            fitness,
            &mut derive_stream(6, "pafs"),
        )
        .unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), res.unique_trainings);
        assert!(res.unique_trainings <= 15);
        assert_eq!(
            res.total_epsilon,
            pafs_total_budget(0.1, res.unique_trainings, 1e-6).unwrap()
        );
    }

    #[test]
    fn pafs_single_candidate() {
        let res = pafs(
            &FeatureSet::new(vec![3]),
            &PafsParams::default(),
            |_| Ok(0.8),
            &mut derive_stream(7, "pafs"),
        )
        .unwrap();
        assert_eq!(res.search.best, FeatureSet::new(vec![3]));
        assert_eq!(res.unique_trainings, 1);
        assert_eq!(res.total_epsilon, pafs_total_budget(0.1, 1, 1e-6).unwrap());
    }

    #[test]
    fn pafs_fitness_error_names_subset() {
        let err = pafs(
            &FeatureSet::new(vec![1]),
            &PafsParams::default(),
            |_| Err(Error::arg("boom")),
            &mut derive_stream(8, "pafs"),
        )
        .unwrap_err();
        match err {
            Error::Fitness { key, .. } => assert_eq!(key, "{1}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn random_subset_frequencies() {
        let c = FeatureSet::all(10);
        let mut r = derive_stream(9, "rs");
        assert_eq!(random_subset(&c, 10, &mut r).unwrap(), c);
        assert!(random_subset(&c, 0, &mut r).unwrap().is_empty());
        assert!(random_subset(&c, 11, &mut r).is_err());
        let trials = 10_000;
        let mut counts = [0usize; 10];
        for _ in 0..trials {
            for &i in random_subset(&c, 3, &mut r).unwrap().indices() {
                counts[i] += 1;
            }
        }
        let se = (0.3f64 * 0.7 / trials as f64).sqrt();
        for c in counts {
            assert!((c as f64 / trials as f64 - 0.3).abs() < 4.0 * se);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn merit_is_permutation_invariant(
                cy in proptest::collection::vec(0.0f64..1.0, 5),
                pw in proptest::collection::vec(0.0f64..1.0, 10),
                subset in proptest::collection::btree_set(0usize..5, 1..5),
                seed in any::<u64>(),
            ) {
                let mut pairs = Vec::new();
                let mut it = pw.iter();
                for i in 0..5 { for j in i + 1..5 { pairs.push((i, j, *it.next().unwrap())); } }
                let t = table(&cy, &pairs);
                let mut perm: Vec<usize> = (0..5).collect();
                use rand::seq::SliceRandom;
                perm.shuffle(&mut derive_stream(seed, "perm"));
                // Relabel feature i as perm[i].
                let mut cy2 = vec![0.0; 5];
                for i in 0..5 { cy2[perm[i]] = cy[i]; }
                let pairs2: Vec<_> = pairs.iter().map(|&(i, j, v)| (perm[i], perm[j], v)).collect();
                let t2 = table(&cy2, &pairs2);
                let s: Vec<usize> = subset.iter().copied().collect();
                let s2: Vec<usize> = s.iter().map(|&i| perm[i]).collect();
                let a = merit(&FeatureSet::new(s), &t).unwrap();
                let b = merit(&FeatureSet::new(s2), &t2).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn suc_in_unit_interval_and_symmetric(
                a in proptest::collection::vec(0u32..4, 1..40),
                seed in any::<u64>(),
            ) {
                let mut r = derive_stream(seed, "b");
                let b: Vec<u32> = a.iter().map(|_| r.index(3) as u32).collect();
                let (x, y) = (col(&a), col(&b));
                let s = suc(&x, &y).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert!((s - suc(&y, &x).unwrap()).abs() < 1e-12);
            }
        }
    }
}
