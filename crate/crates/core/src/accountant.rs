//! Privacy accounting for single DP-SGD trainings and for whole search workflows.
//!
//! DP-SGD is accounted with the Rényi DP of the Poisson-subsampled Gaussian
//! mechanism. Workflows that train many models (PAAS, PAFS) compose with the
//! advanced composition theorem; randomized architecture search (RS) uses the
//! private-selection bound `ε + 8ε′`, and MGRS composes RS sequentially over
//! generations.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters that determine the privacy cost of one DP-SGD run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSgdSetting {
    pub n: usize,
    pub batch: usize,
    pub epochs: usize,
    pub noise_multiplier: f64,
    pub clip_l2: f64,
    pub delta: f64,
}

impl DpSgdSetting {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::arg("n, batch and epochs must be positive"));
        }
        if self.batch > self.n {
            return Err(Error::arg(format!(
                "batch {} exceeds dataset size {}",
                self.batch, self.n
            )));
        }
        if !(self.noise_multiplier >= 0.0) || !(self.clip_l2 > 0.0) {
            return Err(Error::arg(
                "noise multiplier must be >= 0 and clip norm > 0",
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::arg("delta must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Poisson sampling rate `batch / n`.
    pub fn sampling_rate(&self) -> f64 {
        self.batch as f64 / self.n as f64
    }

    pub fn steps(&self) -> usize {
        self.epochs * self.n.div_ceil(self.batch)
    }
}

/// Default RDP orders: 1.25..=9.75 by 0.25, 10..=64, 128, 256.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (0..35).map(|i| 1.25 + 0.25 * i as f64).collect();
    orders.extend((10..=64).map(f64::from));
    orders.extend([128.0, 256.0]);
    orders
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// RDP of one step at integer order `alpha` via the binomial expansion in log space.
fn rdp_integer_order(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let mut log_a = f64::NEG_INFINITY;
    let mut log_binom = 0.0;
    for i in 0..=alpha {
        let fi = i as f64;
        let term = log_binom
            + fi * ln_q
            + (alpha as f64 - fi) * ln_1mq
            + (fi * fi - fi) / (2.0 * sigma * sigma);
        log_a = log_add_exp(log_a, term);
        if i < alpha {
            log_binom += ((alpha - i) as f64).ln() - ((i + 1) as f64).ln();
        }
    }
    log_a / (alpha as f64 - 1.0)
}

/// Rényi DP of `steps` compositions of the Poisson-subsampled Gaussian mechanism.
///
/// Integer orders are exact; a fractional order takes the value at the next
/// integer, an upper bound since RDP is nondecreasing in the order.
pub fn rdp_subsampled_gaussian(
    q: f64,
    noise_multiplier: f64,
    steps: usize,
    orders: &[f64],
) -> Result<Vec<f64>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::arg(format!(
            "sampling rate must lie in (0, 1], got {q}"
        )));
    }
    if !(noise_multiplier > 0.0) {
        return Err(Error::arg("noise multiplier must be > 0"));
    }
    if steps == 0 {
        return Err(Error::arg("steps must be >= 1"));
    }
    orders
        .iter()
        .map(|&alpha| {
            if !(alpha > 1.0) {
                return Err(Error::arg(format!("RDP orders must exceed 1, got {alpha}")));
            }
            let per_step = if q == 1.0 {
                alpha / (2.0 * noise_multiplier * noise_multiplier)
            } else {
                rdp_integer_order(q, noise_multiplier, alpha.ceil() as u64)
            };
            Ok(per_step * steps as f64)
        })
        .collect()
}

fn check_rdp_inputs(rdp: &[f64], orders: &[f64], delta: f64) -> Result<()> {
    if rdp.is_empty() || orders.is_empty() {
        return Err(Error::arg("empty RDP curve"));
    }
    if rdp.len() != orders.len() {
        return Err(Error::DimensionMismatch {
            expected: orders.len(),
            got: rdp.len(),
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::arg("delta must lie in (0, 1)"));
    }
    Ok(())
}

fn argmin(values: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NAN), |best, cur| {
        if cur.0 < best.0 {
            cur
        } else {
            best
        }
    })
}

/// Classic RDP to `(ε, δ)` conversion: `min_α rdp(α) + ln(1/δ)/(α−1)`.
///
/// Returns `(epsilon, best_order)`.
pub fn rdp_to_dp(rdp: &[f64], orders: &[f64], delta: f64) -> Result<(f64, f64)> {
    check_rdp_inputs(rdp, orders, delta)?;
    Ok(argmin(
        rdp.iter()
            .zip(orders)
            .map(|(&r, &a)| (r + (1.0 / delta).ln() / (a - 1.0), a)),
    ))
}

/// Tighter conversion `rdp(α) + ln(1 − 1/α) − (ln δ + ln α)/(α − 1)`.
///
/// This is the conversion used by the reference DP-SGD tooling; the classic
/// bound overstates ε by roughly 20% in the usual DP-SGD regimes.
pub fn rdp_to_dp_tight(rdp: &[f64], orders: &[f64], delta: f64) -> Result<(f64, f64)> {
    check_rdp_inputs(rdp, orders, delta)?;
    let (eps, order) = argmin(rdp.iter().zip(orders).map(|(&r, &a)| {
        let eps = if delta * delta + (-r).exp_m1() > 0.0 {
            0.0
        } else if a > 1.01 {
            r + (-1.0 / a).ln_1p() - (delta * a).ln() / (a - 1.0)
        } else {
            f64::INFINITY
        };
        (eps, a)
    }));
    Ok((eps.max(0.0), order))
}

/// Result of accounting one DP-SGD configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpSgdAccounting {
    pub epsilon: f64,
    pub best_order: f64,
    pub steps: usize,
    pub q: f64,
}

pub fn dpsgd_accounting(setting: &DpSgdSetting) -> Result<DpSgdAccounting> {
    setting.validate()?;
    let (q, steps) = (setting.sampling_rate(), setting.steps());
    if setting.noise_multiplier == 0.0 {
        return Ok(DpSgdAccounting {
            epsilon: f64::INFINITY,
            best_order: f64::NAN,
            steps,
            q,
        });
    }
    let orders = default_orders();
    let rdp = rdp_subsampled_gaussian(q, setting.noise_multiplier, steps, &orders)?;
    let (epsilon, best_order) = rdp_to_dp_tight(&rdp, &orders, setting.delta)?;
    Ok(DpSgdAccounting {
        epsilon,
        best_order,
        steps,
        q,
    })
}

/// ε spent by a DP-SGD run. A zero noise multiplier yields `+∞`.
pub fn dpsgd_epsilon(setting: &DpSgdSetting) -> Result<f64> {
    Ok(dpsgd_accounting(setting)?.epsilon)
}

/// Smallest noise multiplier (to relative precision 1e-6) whose ε is at most `target`.
pub fn noise_multiplier_for_epsilon(template: &DpSgdSetting, target: f64) -> Result<f64> {
    if !(target > 0.0) {
        return Err(Error::arg("target epsilon must be > 0"));
    }
    let eps_at = |z: f64| {
        dpsgd_epsilon(&DpSgdSetting {
            noise_multiplier: z,
            ..*template
        })
    };
    let (mut lo, mut hi) = (1e-3, 1.0);
    while eps_at(hi)? > target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Infeasible(format!(
                "no noise multiplier reaches epsilon {target}"
            )));
        }
    }
    while (hi - lo) / hi > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Advanced composition of `c` ε-DP mechanisms:
/// `ε √(2c ln(1/δ′)) + c ε (e^ε − 1)`.
pub fn advanced_composition(epsilon: f64, c: usize, delta_prime: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::arg("epsilon must be > 0"));
    }
    if !(delta_prime > 0.0 && delta_prime < 1.0) {
        return Err(Error::arg(format!(
            "delta' must lie in (0, 1), got {delta_prime}"
        )));
    }
    let c = c as f64;
    Ok(epsilon * (2.0 * c * (1.0 / delta_prime).ln()).sqrt() + c * epsilon * epsilon.exp_m1())
}

/// δ′ used when a workflow does not specify one.
pub const DEFAULT_DELTA_PRIME: f64 = 1e-6;

/// Residual `x v − (4/ε′) ln(1/(ε′ δ k))` of the private-selection condition;
/// the condition holds iff the residual is nonnegative.
pub fn rs_condition_residual(eps_prime: f64, x: f64, v: usize, k: usize, delta_fail: f64) -> f64 {
    x * v as f64 - 4.0 / eps_prime * (1.0 / (eps_prime * delta_fail * k as f64)).ln()
}

/// Smallest ε′ in `(0, 1/2)` meeting the RS selection condition, by bisection to 1e-9.
pub fn rs_epsilon_prime(x: f64, v: usize, k: usize, delta_fail: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::arg("loss proportion x must lie in (0, 1)"));
    }
    if v == 0 || k == 0 {
        return Err(Error::arg(
            "validation size and candidate count must be >= 1",
        ));
    }
    if !(delta_fail > 0.0 && delta_fail < 1.0) {
        return Err(Error::arg("failure probability must lie in (0, 1)"));
    }
    let holds = |e: f64| rs_condition_residual(e, x, v, k, delta_fail) >= 0.0;
    let mut hi = 0.5 * (1.0 - 1e-12);
    if !holds(hi) {
        let rhs = 4.0 / hi * (1.0 / (hi * delta_fail * k as f64)).ln();
        let required_v = (rhs / x).ceil();
        return Err(Error::Infeasible(format!(
            "no eps' < 1/2 satisfies the selection condition; validation size must be at least {required_v} (got {v})"
        )));
    }
    let mut lo = 1e-15;
    if holds(lo) {
        return Ok(lo);
    }
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Overall RS budget: final training plus private selection, `ε + 8ε′`.
pub fn rs_total_budget(eps_train: f64, eps_prime: f64) -> Result<f64> {
    if !(eps_train > 0.0) || !(eps_prime >= 0.0) {
        return Err(Error::arg("RS budget needs eps_train > 0 and eps' >= 0"));
    }
    Ok(eps_train + 8.0 * eps_prime)
}

/// Sequential composition over generations.
pub fn mgrs_total_budget(per_generation: &[f64]) -> Result<f64> {
    if per_generation.is_empty() {
        return Err(Error::arg("MGRS needs at least one generation"));
    }
    if per_generation.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::arg("per-generation budgets must be nonnegative"));
    }
    Ok(per_generation.iter().sum())
}

/// MGRS budget breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgrsBudget {
    pub eps_train: f64,
    pub eps_prime: Vec<f64>,
    /// Per-generation charges; the first carries the final training.
    pub per_generation: Vec<f64>,
    pub total: f64,
}

/// MGRS budget with ε′ᵢ from the RS condition at `k = kᵢ` and fixed `(x, v, δ)`.
///
/// Each generation is an RS selection costing `8ε′ᵢ`; the released model is
/// trained once, so `ε_train` is charged once. With a single generation this
/// equals [`rs_total_budget`].
pub fn mgrs_workflow_budget(
    eps_train: f64,
    x: f64,
    v: usize,
    ks: &[usize],
    delta_fail: f64,
) -> Result<MgrsBudget> {
    let eps_prime = ks
        .iter()
        .map(|&k| rs_epsilon_prime(x, v, k, delta_fail))
        .collect::<Result<Vec<_>>>()?;
    mgrs_budget_from_eps_prime(eps_train, &eps_prime)
}

pub fn mgrs_budget_from_eps_prime(eps_train: f64, eps_prime: &[f64]) -> Result<MgrsBudget> {
    if !(eps_train > 0.0) {
        return Err(Error::arg("eps_train must be > 0"));
    }
    let per_generation: Vec<f64> = eps_prime
        .iter()
        .enumerate()
        .map(|(i, e)| if i == 0 { eps_train + 8.0 * e } else { 8.0 * e })
        .collect();
    let total = mgrs_total_budget(&per_generation)?;
    Ok(MgrsBudget {
        eps_train,
        eps_prime: eps_prime.to_vec(),
        per_generation,
        total,
    })
}

/// PAFS budget: advanced composition over the unique feature sets trained.
pub fn pafs_total_budget(eps: f64, unique_trainings: usize, delta_prime: f64) -> Result<f64> {
    advanced_composition(eps, unique_trainings, delta_prime)
}

/// One charged mechanism invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub label: String,
    pub epsilon: f64,
    pub delta: f64,
    pub training: bool,
}

/// Append-only record of the mechanisms a workflow invoked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositionLedger {
    entries: Vec<LedgerEntry>,
}

impl CompositionLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, label: impl Into<String>, epsilon: f64, delta: f64, training: bool) {
        self.entries.push(LedgerEntry {
            label: label.into(),
            epsilon,
            delta,
            training,
        });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    /// Number of distinct training labels, the `c` of advanced composition.
    pub fn unique_trainings(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.training)
            .map(|e| e.label.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// Plain sum of every entry's ε.
    pub fn sequential_epsilon(&self) -> f64 {
        self.entries.iter().map(|e| e.epsilon).sum()
    }

    /// Advanced composition of the unique trainings at per-training ε `eps_train`.
    pub fn advanced_epsilon(&self, eps_train: f64, delta_prime: f64) -> Result<f64> {
        advanced_composition(eps_train, self.unique_trainings(), delta_prime)
    }
}
