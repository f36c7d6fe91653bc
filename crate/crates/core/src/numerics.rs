//! Dense vector/matrix helpers, numerically safe elementary functions and the
//! seeded random number generator used throughout the crate.
//!
//! All arithmetic is `f64`. Vectors are plain `Vec<f64>` / `&[f64]`; [`Mat`] is
//! a row-major matrix.
//!
//! # Random numbers
//!
//! [`Rng`] is ChaCha8 (`rand_chacha::ChaCha8Rng`) keyed by a 64-bit seed and a
//! 64-bit stream id. The stream id lets one experiment seed drive several
//! independent generators (model init, `u` init, shuffling, augmentation)
//! without the draws of one disturbing another. Gaussian draws use the
//! ziggurat sampler from `rand_distr`. Given the same seed, stream and call
//! sequence the output is identical on every platform.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floor applied to the argument of every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Norms at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-30;

/// `ln(max(x, LOG_EPS))`.
#[inline]
pub fn safe_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot_unchecked(v, v).sqrt()
}

/// Scale `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= ZERO_NORM {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Mat { rows, cols, data })
    }

    /// Build a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::LengthMismatch {
                    left: r.len(),
                    right: cols,
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// `W x + b`.
    pub(crate) fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.iter_rows()
            .zip(bias)
            .map(|(row, b)| dot_unchecked(row, x) + b)
            .collect()
    }

    /// `Wᵀ v`.
    pub(crate) fn t_mul(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (row, &vi) in self.iter_rows().zip(v) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * vi;
            }
        }
        out
    }

    /// `self += a bᵀ`.
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols;
        for (row, &ai) in self.data.chunks_exact_mut(cols).zip(a) {
            for (x, bj) in row.iter_mut().zip(b) {
                *x += ai * bj;
            }
        }
    }
}

/// Seeded ChaCha8 generator; see the module docs.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// One draw from `N(mean, std^2)`.
    pub fn gaussian(&mut self, mean: f64, std: f64) -> Result<f64> {
        if !(std >= 0.0) {
            return Err(Error::NegativeStd(std));
        }
        Ok(mean + std * self.standard_normal())
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Module-level alias so callers can write `numerics::sample_gaussian`.
pub fn sample_gaussian(rng: &mut Rng, mean: f64, std: f64) -> Result<f64> {
    rng.gaussian(mean, std)
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0, 5.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        let h = l2_normalize(&[1.0, 1.0]).unwrap();
        // 1/sqrt(2) to 16 digits
        assert!(close(h[0], std::f64::consts::FRAC_1_SQRT_2, 1e-15));
        assert!(close(h[1], std::f64::consts::FRAC_1_SQRT_2, 1e-15));
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
        assert!(l2_normalize(&[1e-31]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for x in &p {
            assert!(close(*x, 1.0 / 3.0, 1e-15));
        }
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(close(p[0], 1.0, 1e-15));
        assert!(p[1] < 1e-300);
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (x, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!(close(*x, want, 1e-15));
        }
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let u = l2_normalize(&[0.3, -1.2, 2.0]).unwrap();
        assert!(close(dot(&u, &u).unwrap(), 1.0, 1e-15));
        assert!(matches!(
            dot(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.25; 4]), 0);
    }

    #[test]
    fn gaussian_degenerate_and_errors() {
        let mut rng = Rng::new(3);
        assert_eq!(rng.gaussian(2.5, 0.0).unwrap(), 2.5);
        assert!(matches!(
            rng.gaussian(0.0, -1.0),
            Err(Error::NegativeStd(_))
        ));
        assert!(rng.gaussian(0.0, f64::NAN).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let mut rng = Rng::new(11);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| rng.gaussian(0.0, 1.0).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn rng_is_deterministic() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xs: Vec<f64> = (0..100).map(|_| a.gaussian(0.0, 1.0).unwrap()).collect();
        let ys: Vec<f64> = (0..100).map(|_| b.gaussian(0.0, 1.0).unwrap()).collect();
        assert_eq!(xs, ys);
        let mut c = Rng::with_stream(42, 1);
        assert_ne!(xs[0], c.gaussian(0.0, 1.0).unwrap());
    }

    #[test]
    fn mat_ops() {
        let w = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(w.affine(&[1.0, 0.0, -1.0], &[0.5, 0.0]), vec![-1.5, -2.0]);
        assert_eq!(w.t_mul(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        let mut g = Mat::zeros(2, 3);
        g.add_outer(&[1.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(g.as_slice(), &[1.0, 0.0, 3.0, 2.0, 0.0, 6.0]);
        assert!(Mat::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..8),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits);
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let q = softmax(&shifted);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!(*a > 0.0 || logits.len() > 1);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn normalize_unit_and_idempotent(v in proptest::collection::vec(-1e3f64..1e3, 1..10)) {
            prop_assume!(norm(&v) > 1e-6);
            let h = l2_normalize(&v).unwrap();
            prop_assert!((norm(&h) - 1.0).abs() < 1e-12);
            let hh = l2_normalize(&h).unwrap();
            for (a, b) in h.iter().zip(&hh) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
