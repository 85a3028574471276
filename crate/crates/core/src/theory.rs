//! Closed forms and Monte Carlo checks for the cost of output perturbation in
//! linear models, crossover-ε estimation, the ε-vs-n law and the DP/SGD
//! convergence trace.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{train, Model, TrainConfig};
use crate::numerics::{cosine_distance, dot, ensure_finite, squared_norm, RngStream};

/// A linear model `θ`, one example `(x, y)` and the Gaussian output
/// perturbation scales of the full (`σ`) and reduced (`σ′`) models. The
/// reduced model drops the last coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearInstance {
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
    pub y: f64,
    pub sigma: f64,
    pub sigma_prime: f64,
}

impl LinearInstance {
    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != self.x.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                got: self.x.len(),
            });
        }
        if self.theta.is_empty() {
            return Err(Error::arg("empty instance"));
        }
        ensure_finite(&self.theta, "theta")?;
        ensure_finite(&self.x, "x")?;
        ensure_finite(&[self.y], "y")?;
        if !(self.sigma >= 0.0 && self.sigma_prime >= 0.0)
            || !self.sigma.is_finite()
            || !self.sigma_prime.is_finite()
        {
            return Err(Error::arg("noise scales must be finite and >= 0"));
        }
        if self.x.iter().all(|&v| v == 0.0) {
            return Err(Error::arg("x must be nonzero"));
        }
        Ok(())
    }

    /// `c = y - θᵀx`.
    pub fn residual(&self) -> f64 {
        self.y - dot(&self.theta, &self.x)
    }

    fn last(&self) -> (f64, f64) {
        (*self.theta.last().unwrap(), *self.x.last().unwrap())
    }

    fn reduced_x_norm2(&self) -> f64 {
        squared_norm(&self.x[..self.x.len() - 1])
    }
}

/// `(y - θᵀx)²`.
pub fn squared_error(theta: &[f64], x: &[f64], y: f64) -> Result<f64> {
    if theta.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: theta.len(),
            got: x.len(),
        });
    }
    let r = y - dot(theta, x);
    Ok(r * r)
}

/// `c² + σ²‖x‖²`: expected squared error of `θ + N(0, σ²I)`.
pub fn expected_dp_error_full(inst: &LinearInstance) -> Result<f64> {
    inst.validate()?;
    let c = inst.residual();
    Ok(c * c + inst.sigma * inst.sigma * squared_norm(&inst.x))
}

/// `c² + 2cθ_m x_m + (θ_m x_m)² + σ′²‖x′‖²`: expected squared error of the
/// model with the last coefficient removed and `N(0, σ′²)` on the rest.
pub fn expected_dp_error_reduced(inst: &LinearInstance) -> Result<f64> {
    inst.validate()?;
    if inst.theta.len() < 2 {
        return Err(Error::arg("reduced model needs at least two coefficients"));
    }
    let c = inst.residual();
    let (tm, xm) = inst.last();
    let s2 = inst.sigma_prime * inst.sigma_prime;
    Ok(c * c + 2.0 * c * tm * xm + (tm * xm).powi(2) + s2 * inst.reduced_x_norm2())
}

/// Largest `|θ_m|` for which the reduced model is guaranteed no worse:
/// `(√(c² + d) - |c|) / |x_m|` with `d = σ²‖x‖² - σ′²‖x′‖²`, or 0 when
/// `c² + d < 0`.
pub fn lemma1_threshold(inst: &LinearInstance) -> Result<f64> {
    inst.validate()?;
    if inst.theta.len() < 2 {
        return Err(Error::arg("reduced model needs at least two coefficients"));
    }
    let (_, xm) = inst.last();
    if xm == 0.0 {
        return Err(Error::arg("x_m must be nonzero"));
    }
    let a2 = inst.sigma * inst.sigma * squared_norm(&inst.x);
    let b2 = inst.sigma_prime * inst.sigma_prime * inst.reduced_x_norm2();
    let c2 = inst.residual().powi(2);
    let inner = c2 + a2 - b2;
    if inner < 0.0 {
        return Ok(0.0);
    }
    Ok((inner.sqrt() - c2.sqrt()) / xm.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearModel {
    Full,
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

const MC_CHUNK: usize = 1 << 16;

/// Monte Carlo mean squared error of the perturbed full or reduced model.
///
/// Both variants draw `m` standard normals per trial in the same order (the
/// reduced model ignores the last one), so calling them with the same stream
/// gives common random numbers. Trials are split into fixed chunks, each
/// with its own substream, and merged in chunk order.
pub fn mc_expected_error(
    model: LinearModel,
    inst: &LinearInstance,
    trials: usize,
    rng: &RngStream,
) -> Result<McEstimate> {
    inst.validate()?;
    if trials == 0 {
        return Err(Error::arg("trials must be >= 1"));
    }
    let m = inst.theta.len();
    if model == LinearModel::Reduced && m < 2 {
        return Err(Error::arg("reduced model needs at least two coefficients"));
    }
    let (used, sigma) = match model {
        LinearModel::Full => (m, inst.sigma),
        LinearModel::Reduced => (m - 1, inst.sigma_prime),
    };
    let base = inst.y - dot(&inst.theta[..used], &inst.x[..used]);
    let chunks = trials.div_ceil(MC_CHUNK);
    let parts: Vec<(usize, f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng.child(format!("mc/{c}"));
            let len = MC_CHUNK.min(trials - c * MC_CHUNK);
            let (mut mean, mut m2) = (0.0, 0.0);
            for t in 0..len {
                let mut noise = 0.0;
                for i in 0..m {
                    let z = r.standard_normal();
                    if i < used {
                        noise += z * inst.x[i];
                    }
                }
                let e = (base - sigma * noise).powi(2);
                let d = e - mean;
                mean += d / (t + 1) as f64;
                m2 += d * (e - mean);
            }
            (len, mean, m2)
        })
        .collect();
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for (nb, mb, m2b) in parts {
        let total = n + nb;
        let d = mb - mean;
        mean += d * nb as f64 / total as f64;
        m2 += m2b + d * d * (n as f64) * (nb as f64) / total as f64;
        n = total;
    }
    let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
    Ok(McEstimate {
        mean,
        stderr: (var / n as f64).sqrt(),
        trials: n,
    })
}

/// `err_dp - err_nonprivate`; negative when the noise regularizes.
pub fn privacy_cost(err_dp: f64, err_nonprivate: f64) -> f64 {
    err_dp - err_nonprivate
}

/// Metric (higher is better) sampled at strictly increasing ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    points: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    epsilon: f64,
    metric: f64,
}

impl AccuracyCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::arg("empty curve"));
        }
        for &(e, v) in &points {
            if !e.is_finite() || !v.is_finite() {
                return Err(Error::arg("curve values must be finite"));
            }
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::arg("curve epsilons must be strictly increasing"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let rows = rd
            .deserialize::<CurveRow>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(rows.into_iter().map(|r| (r.epsilon, r.metric)).collect())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut wr = csv::Writer::from_path(path)?;
        for &(epsilon, metric) in &self.points {
            wr.serialize(CurveRow { epsilon, metric })?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "epsilon", rename_all = "snake_case")]
pub enum CrossoverEpsilon {
    /// Largest grid ε at which the simple model strictly wins.
    Value(f64),
    /// The simple model wins at every grid point.
    Infinity,
    /// The simple model never wins.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossoverReport {
    pub estimate: CrossoverEpsilon,
    /// Root of the linearly interpolated metric difference just above the
    /// grid estimate, when the next grid point exists.
    pub interpolated: Option<f64>,
    /// Interpolated location of every sign change of `simple - complex`.
    pub sign_changes: Vec<f64>,
    pub diagnostic: Option<String>,
}

fn root(e0: f64, d0: f64, e1: f64, d1: f64) -> f64 {
    if d0 == d1 {
        return e1;
    }
    e0 + (e1 - e0) * d0 / (d0 - d1)
}

/// Crossover ε of a simple and a complex model sampled on the same grid.
pub fn crossover_epsilon(
    simple: &AccuracyCurve,
    complex: &AccuracyCurve,
) -> Result<CrossoverReport> {
    if simple.epsilons() != complex.epsilons() {
        return Err(Error::arg("curves must share the same epsilon grid"));
    }
    let eps = simple.epsilons();
    let diff: Vec<f64> = simple
        .points
        .iter()
        .zip(&complex.points)
        .map(|(s, c)| s.1 - c.1)
        .collect();
    let wins: Vec<usize> = (0..diff.len()).filter(|&i| diff[i] > 0.0).collect();

    let mut sign_changes = Vec::new();
    for i in 0..diff.len().saturating_sub(1) {
        let (a, b) = (diff[i] > 0.0, diff[i + 1] > 0.0);
        if a != b {
            sign_changes.push(root(eps[i], diff[i], eps[i + 1], diff[i + 1]));
        }
    }

    let (estimate, interpolated, diagnostic) = match wins.last() {
        None => (
            CrossoverEpsilon::None,
            None,
            Some("the simple model never outperforms the complex model on this grid".to_string()),
        ),
        Some(_) if wins.len() == diff.len() => (
            CrossoverEpsilon::Infinity,
            None,
            Some("the simple model outperforms the complex model at every grid point".to_string()),
        ),
        Some(&i) => {
            let interp =
                (i + 1 < diff.len()).then(|| root(eps[i], diff[i], eps[i + 1], diff[i + 1]));
            let diag =
                (sign_changes.len() > 1).then(|| format!("{} sign changes", sign_changes.len()));
            (CrossoverEpsilon::Value(eps[i]), interp, diag)
        }
    };
    Ok(CrossoverReport {
        estimate,
        interpolated,
        sign_changes,
        diagnostic,
    })
}

/// Least-squares fit of `ε = ln(α + β/n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsFit {
    pub alpha: f64,
    pub beta: f64,
    /// RMS of `ε - ln(α + β/n)` over the points.
    pub residual: f64,
    /// True when the unconstrained α was below 1 and was clamped.
    pub alpha_clamped: bool,
}

impl EpsFit {
    pub fn predict(&self, n: f64) -> f64 {
        (self.alpha + self.beta / n).ln()
    }
}

/// Fits `e^ε = α + β·(1/n)` by ordinary least squares, keeping `α ≥ 1`.
pub fn fit_eps_vs_n(points: &[(f64, f64)]) -> Result<EpsFit> {
    if points.len() < 2 {
        return Err(Error::arg("need at least two points"));
    }
    if points
        .iter()
        .any(|&(n, e)| !(n > 0.0) || !n.is_finite() || !e.is_finite())
    {
        return Err(Error::arg("points need n > 0 and finite epsilon"));
    }
    let u: Vec<f64> = points.iter().map(|p| 1.0 / p.0).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1.exp()).collect();
    let k = u.len() as f64;
    let mu = u.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let suu: f64 = u.iter().map(|v| (v - mu).powi(2)).sum();
    if suu <= f64::EPSILON * mu * mu * k {
        return Err(Error::arg("all n are equal; the fit is degenerate"));
    }
    let suy: f64 = u.iter().zip(&y).map(|(a, b)| (a - mu) * (b - my)).sum();
    let mut beta = suy / suu;
    let mut alpha = my - beta * mu;
    let mut alpha_clamped = false;
    if alpha < 1.0 {
        alpha = 1.0;
        beta = u.iter().zip(&y).map(|(a, b)| a * (b - 1.0)).sum::<f64>()
            / u.iter().map(|a| a * a).sum::<f64>();
        alpha_clamped = true;
    }
    let mut fit = EpsFit {
        alpha,
        beta,
        residual: 0.0,
        alpha_clamped,
    };
    let ss: f64 = points
        .iter()
        .map(|&(n, e)| {
            let p = fit.predict(n);
            if p.is_finite() {
                (e - p).powi(2)
            } else {
                f64::INFINITY
            }
        })
        .sum();
    fit.residual = (ss / k).sqrt();
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub epoch: usize,
    pub cosine_distance: f64,
}

/// Outcome of a matched SGD / DP-SGD pair.
#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub trace: Vec<TracePoint>,
    pub sgd_model: Model,
    pub dp_model: Model,
}

/// Per-epoch cosine distance between two parameter trajectories.
pub fn trace_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<TracePoint>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (u, v))| {
            // Identical vectors are at distance 0 even when both are zero.
            let d = if u == v { 0.0 } else { cosine_distance(u, v)? };
            Ok(TracePoint {
                epoch: i + 1,
                cosine_distance: d,
            })
        })
        .collect()
}

/// Trains copies of `init` with `sgd` and `dp` on the same stream (so both
/// see the same batches) and records the cosine distance after each epoch.
pub fn convergence_trace(
    init: &Model,
    data: &Dataset,
    sgd: &TrainConfig,
    dp: &TrainConfig,
    rng: &RngStream,
) -> Result<ConvergenceRun> {
    if sgd.epochs != dp.epochs || sgd.batch != dp.batch {
        return Err(Error::arg("matched runs need equal epochs and batch size"));
    }
    let run = |cfg: &TrainConfig| -> Result<(Model, Vec<Vec<f64>>)> {
        let mut model = init.clone();
        let mut snaps = Vec::with_capacity(cfg.epochs);
        let mut hook = |_: usize, m: &Model| snaps.push(m.params.theta.clone());
        train(&mut model, &data.x, &data.y, cfg, rng, Some(&mut hook))?;
        Ok((model, snaps))
    };
    let (sgd_model, a) = run(sgd)?;
    let (dp_model, b) = run(dp)?;
    if sgd_model.arch != dp_model.arch {
        return Err(Error::arg("architecture mismatch between the two runs"));
    }
    Ok(ConvergenceRun {
        trace: trace_distance(&a, &b)?,
        sgd_model,
        dp_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::derive_stream;
    use proptest::prelude::*;

    fn inst(theta: &[f64], x: &[f64], y: f64, s: f64, sp: f64) -> LinearInstance {
        LinearInstance {
            theta: theta.to_vec(),
            x: x.to_vec(),
            y,
            sigma: s,
            sigma_prime: sp,
        }
    }

    #[test]
    fn squared_error_examples() {
        assert_eq!(squared_error(&[1.0, 0.5], &[1.0, 1.0], 1.5).unwrap(), 0.0);
        assert_eq!(squared_error(&[1.0, 1.0], &[1.0, 1.0], 3.0).unwrap(), 1.0);
        assert_eq!(squared_error(&[2.0, 1.0], &[1.0, 1.0], 3.0).unwrap(), 0.0);
        assert!(squared_error(&[1.0], &[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn closed_forms_match_mc_oracle() {
        let rng = derive_stream(1, "lemma");
        let cases = [
            (inst(&[1.0, 0.5], &[1.0, 1.0], 1.5, 1.0, 1.0), 2.0, 1.25),
            (inst(&[1.0, 1.0], &[1.0, 1.0], 3.0, 1.0, 1.0), 3.0, 5.0),
        ];
        for (i, full, reduced) in cases {
            assert!((expected_dp_error_full(&i).unwrap() - full).abs() < 1e-12);
            assert!((expected_dp_error_reduced(&i).unwrap() - reduced).abs() < 1e-12);
            let f = mc_expected_error(LinearModel::Full, &i, 1_000_000, &rng).unwrap();
            let r = mc_expected_error(LinearModel::Reduced, &i, 1_000_000, &rng).unwrap();
            assert!((f.mean - full).abs() < 0.01 * full, "{f:?}");
            assert!((r.mean - reduced).abs() < 0.01 * reduced, "{r:?}");
        }
    }

    #[test]
    fn degenerate_cases() {
        let i = inst(&[1.0, 0.5], &[1.0, 1.0], 1.2, 0.0, 0.0);
        assert_eq!(
            expected_dp_error_full(&i).unwrap(),
            squared_error(&i.theta, &i.x, i.y).unwrap()
        );
        let e = mc_expected_error(LinearModel::Full, &i, 100, &derive_stream(2, "d")).unwrap();
        assert!((e.mean - squared_error(&i.theta, &i.x, i.y).unwrap()).abs() < 1e-12);
        assert_eq!(e.stderr, 0.0);
        // theta_m = 0 and x_m = 0: both models coincide.
        let i = inst(&[1.0, 0.0], &[1.0, 0.0], 2.0, 0.7, 0.7);
        assert!(
            (expected_dp_error_full(&i).unwrap() - expected_dp_error_reduced(&i).unwrap()).abs()
                < 1e-12
        );
        assert!(lemma1_threshold(&i).is_err());
        assert!(expected_dp_error_reduced(&inst(&[1.0], &[1.0], 0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn threshold_examples() {
        let t = lemma1_threshold(&inst(&[1.0, 1.0], &[1.0, 1.0], 3.0, 1.0, 1.0)).unwrap();
        assert!((t - (2f64.sqrt() - 1.0)).abs() < 1e-12);
        let t =
            lemma1_threshold(&inst(&[0.3, 2.0], &[0.5, 0.8], 0.3 * 0.5 + 1.6, 1.7, 1.7)).unwrap();
        assert!((t - 1.7).abs() < 1e-12);
        // sigma' much larger than sigma: reduced model never guaranteed better.
        assert_eq!(
            lemma1_threshold(&inst(&[1.0, 1.0], &[1.0, 1.0], 2.0, 0.1, 5.0)).unwrap(),
            0.0
        );
        // d stays positive as x_m shrinks when sigma > sigma'.
        let mut last = 0.0;
        for xm in [1.0, 0.5, 0.1, 0.01, 0.001] {
            let t = lemma1_threshold(&inst(&[1.0, 1.0], &[1.0, xm], 2.0 + xm, 2.0, 1.0)).unwrap();
            assert!(t > last);
            last = t;
        }
    }

    #[test]
    fn threshold_equalizes_mc_errors() {
        let base = inst(&[1.0, 1.0], &[1.0, 1.0], 3.0, 1.0, 1.0);
        let t = lemma1_threshold(&base).unwrap();
        // Keep c = 1 with theta_m x_m of the same sign as c: the bound is tight there.
        let mut i = base.clone();
        i.theta[1] = t;
        i.y = 1.0 + i.theta[0] + t;
        let rng = derive_stream(3, "eq");
        let f = mc_expected_error(LinearModel::Full, &i, 1_000_000, &rng).unwrap();
        let r = mc_expected_error(LinearModel::Reduced, &i, 1_000_000, &rng).unwrap();
        assert!((f.mean - r.mean).abs() < 0.02 * f.mean, "{f:?} {r:?}");
    }

    #[test]
    fn mc_variance_shrinks() {
        let i = inst(&[1.0, 0.5], &[1.0, 1.0], 1.5, 1.0, 1.0);
        let small =
            mc_expected_error(LinearModel::Full, &i, 10_000, &derive_stream(4, "v")).unwrap();
        let big =
            mc_expected_error(LinearModel::Full, &i, 1_000_000, &derive_stream(4, "v")).unwrap();
        let ratio = small.stderr / big.stderr;
        assert!((ratio - 10.0).abs() < 1.0, "{ratio}");
    }

    #[test]
    fn mc_matches_closed_form_sweep() {
        let mut r = derive_stream(5, "sweep");
        let mut fails = 0;
        for k in 0..100 {
            let m = 2 + r.index(3);
            let i = LinearInstance {
                theta: (0..m).map(|_| r.uniform() * 4.0 - 2.0).collect(),
                x: (0..m).map(|_| r.uniform() * 2.0 - 1.0).collect(),
                y: r.uniform() * 4.0 - 2.0,
                sigma: 0.1 + r.uniform() * 2.0,
                sigma_prime: 0.1 + r.uniform() * 2.0,
            };
            let e =
                mc_expected_error(LinearModel::Full, &i, 20_000, &r.child(format!("{k}"))).unwrap();
            if (e.mean - expected_dp_error_full(&i).unwrap()).abs() > 3.0 * e.stderr {
                fails += 1;
            }
        }
        // About 0.3 expected failures at 3 standard errors.
        assert!(fails <= 3, "{fails}");
    }

    #[test]
    fn privacy_cost_examples() {
        assert_eq!(privacy_cost(0.1, 0.1), 0.0);
        assert!((privacy_cost(0.30, 0.10) - 0.20).abs() < 1e-15);
        assert!((privacy_cost(0.08, 0.10) + 0.02).abs() < 1e-15);
    }

    fn ramp() -> (AccuracyCurve, AccuracyCurve) {
        let mut grid = vec![0.1];
        grid.extend((1..=10).map(|e| e as f64));
        let complex = grid
            .iter()
            .map(|&e| {
                let v = if e <= 5.0 {
                    0.5 + 0.3 * (e - 0.1) / 4.9
                } else {
                    0.8 + 0.15 * (e - 5.0) / 5.0
                };
                (e, v)
            })
            .collect();
        let simple = grid.iter().map(|&e| (e, 0.8)).collect();
        (
            AccuracyCurve::new(simple).unwrap(),
            AccuracyCurve::new(complex).unwrap(),
        )
    }

    #[test]
    fn crossover_on_ramp_fixture() {
        let (s, c) = ramp();
        let r = crossover_epsilon(&s, &c).unwrap();
        let CrossoverEpsilon::Value(v) = r.estimate else {
            panic!("{r:?}")
        };
        assert!((v - 5.0).abs() <= 1.0);
        assert!((r.interpolated.unwrap() - 5.0).abs() < 1e-9);
        assert_eq!(r.sign_changes.len(), 1);
    }

    #[test]
    fn crossover_extremes() {
        let (s, c) = ramp();
        assert_eq!(
            crossover_epsilon(&c, &c).unwrap().estimate,
            CrossoverEpsilon::None
        );
        let low = AccuracyCurve::new(s.points().iter().map(|&(e, _)| (e, 0.1)).collect()).unwrap();
        assert_eq!(
            crossover_epsilon(&low, &c).unwrap().estimate,
            CrossoverEpsilon::None
        );
        let high =
            AccuracyCurve::new(s.points().iter().map(|&(e, _)| (e, 0.99)).collect()).unwrap();
        assert_eq!(
            crossover_epsilon(&high, &c).unwrap().estimate,
            CrossoverEpsilon::Infinity
        );
        let other = AccuracyCurve::new(vec![(0.2, 0.1), (1.0, 0.2)]).unwrap();
        assert!(crossover_epsilon(&other, &c).is_err());
        assert!(AccuracyCurve::new(vec![(1.0, 0.1), (1.0, 0.2)]).is_err());
    }

    #[test]
    fn curve_csv_round_trip() {
        let (s, _) = ramp();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        s.write_csv(&p).unwrap();
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .starts_with("epsilon,metric\n"));
        assert_eq!(AccuracyCurve::read_csv(&p).unwrap(), s);
    }

    proptest! {
        #[test]
        fn crossover_invariant_under_monotone_maps(
            a in proptest::collection::vec(0.0f64..1.0, 6),
            b in proptest::collection::vec(0.0f64..1.0, 6),
            k in 0.1f64..5.0,
        ) {
            let grid = [0.1, 0.5, 1.0, 2.0, 5.0, 10.0];
            let mk = |v: &[f64], f: &dyn Fn(f64) -> f64| AccuracyCurve::new(grid.iter().zip(v).map(|(&e, &m)| (e, f(m))).collect()).unwrap();
            let id = |m: f64| m;
            let g = |m: f64| (k * m).exp() + m.powi(3);
            let r1 = crossover_epsilon(&mk(&a, &id), &mk(&b, &id)).unwrap();
            let r2 = crossover_epsilon(&mk(&a, &g), &mk(&b, &g)).unwrap();
            prop_assert_eq!(r1.estimate, r2.estimate);
            prop_assert_eq!(r1.sign_changes.len(), r2.sign_changes.len());
        }

        #[test]
        fn full_error_dominates_noiseless(
            theta in proptest::collection::vec(-3.0f64..3.0, 3),
            x in proptest::collection::vec(0.1f64..3.0, 3),
            y in -5.0f64..5.0,
            s in 0.0f64..3.0,
        ) {
            let i = inst(&theta, &x, y, s, s);
            prop_assert!(expected_dp_error_full(&i).unwrap() >= squared_error(&theta, &x, y).unwrap());
        }

        #[test]
        fn sign_flips_at_sigma(
            x in proptest::collection::vec(0.2f64..2.0, 3),
            t0 in -2.0f64..2.0,
            t1 in -2.0f64..2.0,
            s in 0.1f64..3.0,
            r in 0.05f64..3.0,
        ) {
            // c = 0 by construction.
            let theta = vec![t0, t1, r * s];
            let y = dot(&theta, &x);
            let i = inst(&theta, &x, y, s, s);
            let diff = expected_dp_error_full(&i).unwrap() - expected_dp_error_reduced(&i).unwrap();
            if r < 0.999 { prop_assert!(diff > 0.0); }
            if r > 1.001 { prop_assert!(diff < 0.0); }
        }

        #[test]
        fn fit_exact_on_model_data(alpha in 1.0f64..3.0, beta in 10.0f64..1e5) {
            let pts: Vec<(f64, f64)> = [500.0, 2000.0, 8000.0, 30000.0].iter().map(|&n: &f64| (n, (alpha + beta / n).ln())).collect();
            let f = fit_eps_vs_n(&pts).unwrap();
            prop_assert!(f.residual < 1e-9);
            prop_assert!(((f.beta - beta) / beta).abs() < 1e-8);
        }
    }

    #[test]
    fn fit_examples() {
        let pts: Vec<(f64, f64)> = [1000.0, 2000.0, 5000.0, 10000.0, 30000.0, 60000.0]
            .iter()
            .map(|&n: &f64| (n, (1.1 + 8922.4 / n).ln()))
            .collect();
        let f = fit_eps_vs_n(&pts).unwrap();
        assert!(((f.alpha - 1.1) / 1.1).abs() < 1e-9 && ((f.beta - 8922.4) / 8922.4).abs() < 1e-9);
        assert!(!f.alpha_clamped);
        let flat: Vec<(f64, f64)> = [100.0, 1000.0, 10000.0].iter().map(|&n| (n, 0.7)).collect();
        let f = fit_eps_vs_n(&flat).unwrap();
        assert!(f.beta.abs() < 1e-9 && (f.alpha - 0.7f64.exp()).abs() < 1e-12);
        assert!(fit_eps_vs_n(&[(100.0, 1.0), (100.0, 2.0)]).is_err());
        assert!(fit_eps_vs_n(&[(100.0, 1.0)]).is_err());
        // Decreasing in 1/n forces alpha below 1 and gets clamped.
        let f = fit_eps_vs_n(&[(100.0, 0.5), (1000.0, 0.05)]).unwrap();
        assert!(f.alpha_clamped && f.alpha == 1.0);
    }

    #[test]
    fn trace_distance_checks() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let t = trace_distance(&a, &a).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.iter().all(|p| p.cosine_distance == 0.0));
        assert!(trace_distance(&a, &a[..1]).is_err());
    }
}
