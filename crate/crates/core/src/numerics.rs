//! Seeded randomness, elementary samplers and small linear-algebra helpers.
//!
//! Every randomized routine in the crate takes an [`RngStream`]. Streams are
//! ChaCha8 generators keyed by a master seed and addressed by a 64-bit stream
//! id derived from a byte label, so independent parts of an experiment draw
//! from disjoint, reproducible substreams no matter how work is scheduled.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A reproducible random stream identified by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn label_hash(prefix: &[u8], label: &[u8]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(prefix);
    hasher.update(label);
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    /// Derives the stream for `label` under `master_seed`.
    pub fn derive(master_seed: u64, label: impl AsRef<[u8]>) -> Self {
        Self::new(master_seed, label_hash(b"root", label.as_ref()))
    }

    /// Derives a child stream from this stream's identity (not its position).
    pub fn child(&self, label: impl AsRef<[u8]>) -> Self {
        Self::new(
            self.seed,
            label_hash(&self.stream_id.to_le_bytes(), label.as_ref()),
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Free-function form of [`RngStream::derive`].
pub fn derive_stream(master_seed: u64, label: impl AsRef<[u8]>) -> RngStream {
    RngStream::derive(master_seed, label)
}

/// Draws from `N(mu, sigma^2)`. `sigma == 0` returns `mu` without consuming randomness.
pub fn sample_gaussian(rng: &mut RngStream, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::arg(format!(
            "gaussian sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(mu);
    }
    Ok(mu + sigma * rng.standard_normal())
}

/// Draws from the zero-mean Laplace distribution with the given scale.
pub fn sample_laplace(rng: &mut RngStream, scale: f64) -> Result<f64> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::arg(format!(
            "laplace scale must be finite and > 0, got {scale}"
        )));
    }
    loop {
        let u = rng.uniform() - 0.5;
        let tail = 1.0 - 2.0 * u.abs();
        if tail > 0.0 {
            return Ok(-scale * u.signum() * tail.ln());
        }
    }
}

/// Shannon entropy (bits) of a histogram, with `0 log 0 = 0`.
pub fn entropy(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::arg("entropy of an empty histogram"));
    }
    let total = total as f64;
    let h = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm2(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn squared_norm(u: &[f64]) -> f64 {
    dot(u, u)
}

/// `1 - cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (nu, nv) = (norm2(u), norm2(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::arg("cosine distance of a zero vector"));
    }
    let cos = (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0);
    Ok(1.0 - cos)
}

/// Fails if any value is NaN or infinite.
pub fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::arg(format!("{what}: non-finite value at index {i}"))),
        None => Ok(()),
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// New matrix with the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// New matrix with the given columns, in order.
    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for row in self.iter_rows() {
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Self {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }

    pub fn ensure_finite(&self) -> Result<()> {
        ensure_finite(&self.data, "matrix")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_deterministic_and_label_sensitive() {
        let mut a = derive_stream(42, "pop/0");
        let mut b = derive_stream(42, "pop/0");
        let xs: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);

        let mut c = derive_stream(42, "pop/1");
        assert_ne!(xs[0], c.next_u64());
        let mut d = derive_stream(43, "pop/0");
        let zs: Vec<u64> = (0..100).map(|_| d.next_u64()).collect();
        assert_ne!(xs, zs);
    }

    #[test]
    fn child_depends_on_identity_not_position() {
        let mut a = derive_stream(7, "x");
        let before = a.child("c").next_u64();
        a.next_u64();
        assert_eq!(before, a.child("c").next_u64());
        assert_ne!(before, a.child("d").next_u64());
    }

    #[test]
    fn degenerate_gaussian() {
        let mut r = derive_stream(1, "g");
        assert_eq!(sample_gaussian(&mut r, 3.0, 0.0).unwrap(), 3.0);
        assert!(sample_gaussian(&mut r, 0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let mut r = derive_stream(11, "moments");
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_gaussian(&mut r, 0.0, 1.0).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        let ys: Vec<f64> = (0..n)
            .map(|_| sample_gaussian(&mut r, 0.0, 2.0).unwrap())
            .collect();
        let m = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 4.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn laplace_moments() {
        let mut r = derive_stream(12, "lap");
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_laplace(&mut r, 1.0).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        let below = xs.iter().filter(|&&x| x < 0.0).count() as f64 / n as f64;
        assert!((below - 0.5).abs() < 0.005, "{below}");

        let abs_mean = (0..n)
            .map(|_| sample_laplace(&mut r, 0.01).unwrap().abs())
            .sum::<f64>()
            / n as f64;
        assert!((abs_mean / 0.01 - 1.0).abs() < 0.05, "{abs_mean}");
        assert!(sample_laplace(&mut r, 0.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[5, 5]).unwrap(), 1.0);
        assert_eq!(entropy(&[10]).unwrap(), 0.0);
        assert_eq!(entropy(&[1, 1, 1, 1]).unwrap(), 2.0);
        assert_eq!(entropy(&[0, 3, 0, 3]).unwrap(), 1.0);
        assert!(entropy(&[0, 0]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3, -1.2, 4.0];
        assert!(cosine_distance(&u, &u).unwrap().abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        assert!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_distance(&[1.0], &[1.0, 0.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn entropy_permutation_invariant_and_bounded(
                mut counts in proptest::collection::vec(0u64..50, 1..12),
                seed in any::<u64>(),
            ) {
                prop_assume!(counts.iter().sum::<u64>() > 0);
                let h = entropy(&counts).unwrap();
                prop_assert!(h >= 0.0 && h <= (counts.len() as f64).log2() + 1e-12);
                let mut r = derive_stream(seed, "perm");
                use rand::seq::SliceRandom;
                counts.shuffle(&mut r);
                prop_assert!((entropy(&counts).unwrap() - h).abs() < 1e-12);
                let uniform = vec![1u64; counts.len()];
                prop_assert!(entropy(&uniform).unwrap() >= h - 1e-12);
            }

            #[test]
            fn cosine_scale_invariant(
                u in proptest::collection::vec(-10.0f64..10.0, 4),
                v in proptest::collection::vec(-10.0f64..10.0, 4),
                a in 0.01f64..100.0,
                b in 0.01f64..100.0,
            ) {
                prop_assume!(norm2(&u) > 1e-3 && norm2(&v) > 1e-3);
                let d = cosine_distance(&u, &v).unwrap();
                let su: Vec<f64> = u.iter().map(|x| a * x).collect();
                let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
                prop_assert!((cosine_distance(&su, &sv).unwrap() - d).abs() < 1e-9);
                prop_assert!((0.0..=2.0).contains(&d));
            }
        }
    }
}
