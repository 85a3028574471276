//! Calibrated Gaussian and Laplace noise, and output perturbation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, sample_laplace, RngStream};

/// Global sensitivity of a query or learning algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBound {
    pub l2: f64,
    pub l1: Option<f64>,
}

impl SensitivityBound {
    pub fn new(l2: f64, l1: Option<f64>) -> Result<Self> {
        if !(l2 >= 0.0) || l1.is_some_and(|v| !(v >= 0.0)) {
            return Err(Error::arg("sensitivity must be nonnegative"));
        }
        Ok(Self { l2, l1 })
    }
}

/// An `(epsilon, delta)` pair. `delta == 0` means pure DP.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::arg(format!("epsilon must be > 0, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::arg(format!("delta must lie in [0, 1), got {delta}")));
        }
        Ok(Self { epsilon, delta })
    }

    pub fn is_pure(&self) -> bool {
        self.delta == 0.0
    }
}

/// Noise scale of the classic Gaussian mechanism: `Δ/ε · sqrt(2 ln(1.25/δ))`.
pub fn gaussian_sigma(delta_sens: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(delta_sens > 0.0) {
        return Err(Error::arg("sensitivity must be > 0"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::arg("epsilon must be > 0"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::arg("delta must lie in (0, 1)"));
    }
    Ok(delta_sens / epsilon * (2.0 * (1.25 / delta).ln()).sqrt())
}

/// A Gaussian noise scale together with the budget it was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianCalibration {
    pub sigma: f64,
    pub budget: PrivacyBudget,
    /// The classic calibration is only a proven guarantee for `epsilon <= 1`.
    pub certified: bool,
}

pub fn calibrate_gaussian(
    sens: SensitivityBound,
    budget: PrivacyBudget,
) -> Result<GaussianCalibration> {
    Ok(GaussianCalibration {
        sigma: gaussian_sigma(sens.l2, budget.epsilon, budget.delta)?,
        budget,
        certified: budget.epsilon <= 1.0,
    })
}

/// `theta + z` with `z ~ N(0, sigma^2 I)`.
pub fn gaussian_perturb(theta: &[f64], sigma: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    theta
        .iter()
        .map(|&t| sample_gaussian(rng, t, sigma))
        .collect()
}

/// `value + Lap(sensitivity / epsilon)`. An infinite epsilon returns `value`.
pub fn laplace_perturb(
    value: f64,
    sensitivity: f64,
    epsilon: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    if !(sensitivity > 0.0) || !(epsilon > 0.0) {
        return Err(Error::arg(
            "laplace mechanism needs sensitivity > 0 and epsilon > 0",
        ));
    }
    if epsilon.is_infinite() {
        return Ok(value);
    }
    Ok(value + sample_laplace(rng, sensitivity / epsilon)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{derive_stream, squared_norm};
    use statrs::distribution::{ContinuousCDF, Gamma};

    // Direct evaluation: sqrt(2 ln 125000) = 4.844805262...
    const SIGMA_1_1_1E5: f64 = 4.844_805_262_605_389;

    #[test]
    fn sigma_examples() {
        let s = gaussian_sigma(1.0, 1.0, 1e-5).unwrap();
        assert!((s - SIGMA_1_1_1E5).abs() < 1e-9, "{s}");
        assert!((gaussian_sigma(2.0, 1.0, 1e-5).unwrap() - 2.0 * s).abs() < 1e-12);
        assert!((gaussian_sigma(1.0, 2.0, 1e-5).unwrap() - s / 2.0).abs() < 1e-12);
        assert!(gaussian_sigma(1.0, 1.0, 1.0).is_err());
        assert!(gaussian_sigma(1.0, 0.0, 1e-5).is_err());
    }

    #[test]
    fn calibration_flags_large_epsilon() {
        let sens = SensitivityBound::new(1.0, None).unwrap();
        assert!(
            calibrate_gaussian(sens, PrivacyBudget::new(0.5, 1e-5).unwrap())
                .unwrap()
                .certified
        );
        assert!(
            !calibrate_gaussian(sens, PrivacyBudget::new(4.0, 1e-5).unwrap())
                .unwrap()
                .certified
        );
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(1.0, 0.0).unwrap().is_pure());
        assert!(PrivacyBudget::new(0.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let theta = [1.0, -2.0, 0.5];
        let mut r = derive_stream(0, "p");
        assert_eq!(
            gaussian_perturb(&theta, 0.0, &mut r).unwrap(),
            theta.to_vec()
        );
    }

    fn mean_sq_noise(m: usize, sigma: f64, trials: usize, seed: u64) -> Vec<f64> {
        let mut r = derive_stream(seed, "norms");
        let theta = vec![0.0; m];
        (0..trials)
            .map(|_| squared_norm(&gaussian_perturb(&theta, sigma, &mut r).unwrap()))
            .collect()
    }

    #[test]
    fn squared_noise_norm_means() {
        let s = mean_sq_noise(100, 1.0, 100_000, 1);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean / 100.0 - 1.0).abs() < 0.01, "{mean}");
        let s = mean_sq_noise(10, 2.0, 100_000, 2);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        assert!((mean / 40.0 - 1.0).abs() < 0.02, "{mean}");
    }

    /// Two-sided KS test of ||z||^2 against Gamma(m/2, scale 2 sigma^2).
    #[test]
    fn squared_noise_norm_is_gamma() {
        let (m, sigma, n) = (10usize, 1.5, 100_000usize);
        let mut s = mean_sq_noise(m, sigma, n, 3);
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gamma = Gamma::new(m as f64 / 2.0, 1.0 / (2.0 * sigma * sigma)).unwrap();
        let d = s
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = gamma.cdf(x);
                (f - i as f64 / n as f64)
                    .abs()
                    .max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        // Asymptotic critical value at level 0.01.
        let crit = 1.628 / (n as f64).sqrt();
        assert!(d < crit, "KS statistic {d} >= {crit}");
    }

    #[test]
    fn laplace_example_scale() {
        // n = 5000 validation points, eps' = 0.02 -> scale 1/(5000*0.02) = 0.01.
        let mut r = derive_stream(5, "lap");
        let n = 200_000;
        let mean_abs = (0..n)
            .map(|_| (laplace_perturb(0.9, 1.0 / 5000.0, 0.02, &mut r).unwrap() - 0.9).abs())
            .sum::<f64>()
            / n as f64;
        assert!((mean_abs / 0.01 - 1.0).abs() < 0.02, "{mean_abs}");
    }

    #[test]
    fn laplace_limits_and_determinism() {
        let mut r = derive_stream(5, "lap");
        assert_eq!(
            laplace_perturb(0.7, 1.0, f64::INFINITY, &mut r).unwrap(),
            0.7
        );
        let a = laplace_perturb(0.7, 1.0, 1.0, &mut derive_stream(9, "d")).unwrap();
        let b = laplace_perturb(0.7, 1.0, 1.0, &mut derive_stream(9, "d")).unwrap();
        assert_eq!(a, b);
        assert!(laplace_perturb(0.7, 0.0, 1.0, &mut r).is_err());
        assert!(laplace_perturb(0.7, 1.0, -1.0, &mut r).is_err());
    }

    #[test]
    fn laplace_noise_median_is_zero() {
        let mut r = derive_stream(6, "median");
        let n = 100_000;
        let scale = 0.5;
        let mut noise: Vec<f64> = (0..n)
            .map(|_| laplace_perturb(0.0, scale, 1.0, &mut r).unwrap())
            .collect();
        noise.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = noise[n / 2];
        assert!(median.abs() <= 3.0 * scale / (n as f64).sqrt(), "{median}");
    }
}
