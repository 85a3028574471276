use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::net::{backward, forward_trace, Loss};
use super::{Model, Task};
use crate::accountant::{dpsgd_epsilon, DpSgdSetting};
use crate::data::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::numerics::{norm2, sample_gaussian, Matrix, RngStream};

pub const DEFAULT_LR_GRID: [f64; 6] = [0.0001, 0.001, 0.01, 0.05, 0.1, 0.2];

fn default_delta() -> f64 {
    1e-5
}

/// Mini-batch training settings. Setting both `clip_l2` and
/// `noise_multiplier` switches on DP-SGD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch: usize,
    pub epochs: usize,
    pub loss: Loss,
    #[serde(default)]
    pub clip_l2: Option<f64>,
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    #[serde(default)]
    pub l2_reg: f64,
    #[serde(default)]
    pub seed: u64,
    /// δ reported by the accountant in DP mode.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

impl TrainConfig {
    pub fn sgd(learning_rate: f64, batch: usize, epochs: usize, loss: Loss) -> Self {
        Self {
            learning_rate,
            batch,
            epochs,
            loss,
            clip_l2: None,
            noise_multiplier: None,
            l2_reg: 0.0,
            seed: 0,
            delta: default_delta(),
        }
    }

    pub fn with_dp(mut self, clip_l2: f64, noise_multiplier: f64) -> Self {
        self.clip_l2 = Some(clip_l2);
        self.noise_multiplier = Some(noise_multiplier);
        self
    }

    pub fn is_dp(&self) -> bool {
        self.clip_l2.is_some() && self.noise_multiplier.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_l2.is_some() != self.noise_multiplier.is_some() {
            return Err(Error::Config(
                "DP-SGD needs both clip_l2 and noise_multiplier".into(),
            ));
        }
        if let Some(c) = self.clip_l2 {
            if !(c > 0.0) {
                return Err(Error::arg(format!("clip_l2 must be > 0, got {c}")));
            }
        }
        if let Some(z) = self.noise_multiplier {
            if !(z >= 0.0) || !z.is_finite() {
                return Err(Error::arg(format!(
                    "noise_multiplier must be finite and >= 0, got {z}"
                )));
            }
        }
        if !(self.learning_rate >= 0.0) || !(self.l2_reg >= 0.0) {
            return Err(Error::arg("learning_rate and l2_reg must be >= 0"));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::arg("batch and epochs must be >= 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::arg("delta must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: usize,
    /// Accountant ε in DP mode (`+inf` for zero noise).
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    /// Largest per-example gradient norm after clipping (DP mode only).
    pub max_applied_norm: f64,
}

fn targets_check(model: &Model, x: &Matrix, y: &Labels) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.rows(),
            got: y.len(),
        });
    }
    if x.cols() != model.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.arch.input_dim,
            got: x.cols(),
        });
    }
    Ok(())
}

/// Per-epoch callback for [`train`].
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &Model);

/// Shuffled mini-batch training, plain or DP-SGD.
///
/// Each epoch draws a permutation from `rng.child("shuffle")` and drops the
/// final partial batch. Dropout masks come from `rng.child("dropout")` and
/// DP noise from `rng.child("noise")`, so a DP run and a plain run with the
/// same stream see identical batches. Only trainable layers are updated.
/// `hook` is called after every epoch with the 1-based epoch number.
///
/// In DP mode each per-example gradient is clipped to L2 norm `C`, the sum
/// gets `N(0, (zC)^2)` noise per trainable coordinate, and the result is
/// divided by the batch size. The L2 penalty on weights is data-independent
/// and is added after noising.
pub fn train(
    model: &mut Model,
    x: &Matrix,
    y: &Labels,
    cfg: &TrainConfig,
    rng: &RngStream,
    mut hook: Option<EpochHook<'_>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.loss.check(model)?;
    targets_check(model, x, y)?;
    let n = x.rows();
    if cfg.batch > n {
        return Err(Error::arg(format!(
            "batch {} exceeds training size {n}",
            cfg.batch
        )));
    }
    let mut shuffle_rng = rng.child("shuffle");
    let mut dropout_rng = rng.child("dropout");
    let mut noise_rng = rng.child("noise");
    let has_dropout = model.arch.layers.iter().any(|l| l.dropout_after > 0.0);

    let dims = model.params.len();
    let ranges: Vec<_> = model.params.trainable_ranges().collect();
    let weight_ranges: Vec<_> = model
        .params
        .layout()
        .iter()
        .filter(|s| s.trainable)
        .map(|s| s.weights())
        .collect();
    let mut grad = vec![0.0; dims];
    let mut sum = vec![0.0; dims];
    let mut order: Vec<usize> = (0..n).collect();
    let mut max_applied: f64 = 0.0;
    let mut steps = 0;
    let dp = cfg.clip_l2.zip(cfg.noise_multiplier);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks_exact(cfg.batch) {
            sum.iter_mut().for_each(|v| *v = 0.0);
            for &i in batch {
                let trace = forward_trace(model, x.row(i), has_dropout.then_some(&mut dropout_rng));
                backward(model, &trace, y.target(i), cfg.loss, &mut grad)?;
                let scale = match dp {
                    Some((c, _)) => {
                        let norm = norm2(&grad);
                        let s = if norm > c { c / norm } else { 1.0 };
                        let applied = norm * s;
                        debug_assert!(applied <= c * (1.0 + 1e-12));
                        max_applied = max_applied.max(applied);
                        s
                    }
                    None => 1.0,
                };
                for r in &ranges {
                    for (acc, g) in sum[r.clone()].iter_mut().zip(&grad[r.clone()]) {
                        *acc += scale * g;
                    }
                }
            }
            if let Some((c, z)) = dp {
                if z > 0.0 {
                    let sd = z * c;
                    for r in &ranges {
                        for v in &mut sum[r.clone()] {
                            *v = sample_gaussian(&mut noise_rng, *v, sd)?;
                        }
                    }
                }
            }
            let b = cfg.batch as f64;
            let theta = &mut model.params.theta;
            for r in &ranges {
                sum[r.clone()].iter_mut().for_each(|v| *v /= b);
            }
            if cfg.l2_reg > 0.0 {
                for r in &weight_ranges {
                    for k in r.clone() {
                        sum[k] += cfg.l2_reg * theta[k];
                    }
                }
            }
            for r in &ranges {
                for k in r.clone() {
                    theta[k] -= cfg.learning_rate * sum[k];
                }
            }
            steps += 1;
        }
        if let Some(h) = hook.as_deref_mut() {
            h(epoch, model);
        }
    }

    let (epsilon, delta) = match dp {
        Some((c, z)) => {
            let setting = DpSgdSetting {
                n,
                batch: cfg.batch,
                epochs: cfg.epochs,
                noise_multiplier: z,
                clip_l2: c,
                delta: cfg.delta,
            };
            (Some(dpsgd_epsilon(&setting)?), Some(cfg.delta))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        steps,
        epsilon,
        delta,
        max_applied_norm: max_applied,
    })
}

/// Non-private training on the full dataset.
pub fn sgd_train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainOutcome> {
    if cfg.is_dp() {
        return Err(Error::Config("sgd_train called with DP settings".into()));
    }
    train(model, &data.x, &data.y, cfg, rng, None)
}

/// DP-SGD training on the full dataset; returns the accountant ε.
pub fn dpsgd_train(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainOutcome> {
    if !cfg.is_dp() {
        return Err(Error::Config(
            "dpsgd_train needs clip_l2 and noise_multiplier".into(),
        ));
    }
    train(model, &data.x, &data.y, cfg, rng, None)
}

/// Accuracy for classification, mean absolute error for regression.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.n() == 0 {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    targets_check(model, &data.x, &data.y)?;
    let n = data.n() as f64;
    match (&model.arch.task, &data.y) {
        (Task::Classification { .. }, Labels::Class { values, .. }) => {
            let mut hits = 0usize;
            for (row, &c) in data.x.iter_rows().zip(values) {
                hits += usize::from(model.predict_class(row)? == c);
            }
            Ok(hits as f64 / n)
        }
        (Task::Regression, y) => {
            let mut total = 0.0;
            for (i, row) in data.x.iter_rows().enumerate() {
                total += (model.predict(row)?[0] - y.target(i).as_real()).abs();
            }
            Ok(total / n)
        }
        _ => Err(Error::arg("label type does not match the model task")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSearch {
    pub best_lr: f64,
    pub best_metric: f64,
    pub results: Vec<(f64, f64)>,
}

/// Trains a copy of `init` at each learning rate and keeps the best
/// validation metric. Diverged runs (non-finite metric) rank last; ties keep
/// the earlier grid entry.
///
/// The validation queries are not private; charge them separately if the
/// chosen rate is released.
pub fn grid_search_lr(
    init: &Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    grid: &[f64],
    rng: &RngStream,
) -> Result<LrSearch> {
    if grid.is_empty() {
        return Err(Error::arg("empty learning-rate grid"));
    }
    let higher_better = matches!(init.arch.task, Task::Classification { .. });
    let mut results = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lr in grid {
        let mut m = init.clone();
        let c = TrainConfig {
            learning_rate: lr,
            ..cfg.clone()
        };
        train(&mut m, &train_set.x, &train_set.y, &c, rng, None)?;
        let metric = evaluate(&m, val_set)?;
        results.push((lr, metric));
        let better = match best {
            _ if !metric.is_finite() => false,
            None => true,
            Some((_, b)) => {
                if higher_better {
                    metric > b
                } else {
                    metric < b
                }
            }
        };
        if better {
            best = Some((lr, metric));
        }
    }
    let (best_lr, best_metric) = best.unwrap_or((grid[0], results[0].1));
    Ok(LrSearch {
        best_lr,
        best_metric,
        results,
    })
}
