//! Deterministic, stream-splittable random number generation.
//!
//! Every stochastic component draws from a [`SeededRng`] derived from a root
//! seed plus a purpose label and integer indices (epoch, batch, episode).
//! Derivation is by mixing, not by sharing a generator, so reordering or
//! skipping work in one component never shifts the numbers seen by another.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SampleError {
    #[error("categorical weight at index {index} is {value}, expected finite and >= 0")]
    BadWeight { index: usize, value: f64 },
    #[error("categorical weights sum to {sum}, expected 1 within 1e-6")]
    BadSum { sum: f64 },
    #[error("categorical distribution has empty support")]
    EmptySupport,
}

/// Counter-based generator: cheap to fork into independent named streams.
pub struct SeededRng {
    inner: ChaCha8Rng,
    root: u64,
}

// SplitMix64 finalizer; used to spread label/index entropy across the key.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a, stable across platforms and releases.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl SeededRng {
    pub fn from_root(seed: u64) -> Self {
        Self::derive_raw(seed, 0)
    }

    /// Independent stream for (seed, purpose label, indices). The same inputs
    /// always yield the same stream regardless of what other streams exist.
    pub fn derive(root: u64, label: &str, indices: &[u64]) -> Self {
        let mut acc = mix(root ^ label_hash(label));
        for (k, &ix) in indices.iter().enumerate() {
            acc = mix(acc ^ ix.wrapping_add(0x1000 * (k as u64 + 1)));
        }
        Self::derive_raw(root, acc)
    }

    fn derive_raw(root: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        let a = mix(root);
        let b = mix(a ^ 0xD137_73AB);
        let c = mix(b ^ 0x5851_F42D);
        let d = mix(c ^ 0x2545_F491);
        key[0..8].copy_from_slice(&a.to_le_bytes());
        key[8..16].copy_from_slice(&b.to_le_bytes());
        key[16..24].copy_from_slice(&c.to_le_bytes());
        key[24..32].copy_from_slice(&d.to_le_bytes());
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self { inner, root }
    }

    /// Fork a child stream from this generator's root seed.
    pub fn fork(&self, label: &str, indices: &[u64]) -> Self {
        Self::derive(self.root, label, indices)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller. One fresh pair per call; the second
    /// value is discarded so the draw count per call is fixed.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Rejection sampling to avoid modulo bias.
        let zone = u64::MAX - (u64::MAX % n as u64);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n as u64) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `count` distinct indices drawn uniformly from [0, n), in draw order.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n, "sample_indices({n}, {count})");
        let mut pool: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let j = self.below(pool.len());
            out.push(pool.swap_remove(j));
        }
        out
    }

    /// Tensor of iid uniform(lo, hi) values, filled in row-major order.
    pub fn uniform_tensor(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.uniform_in(lo, hi)).collect();
        Tensor::new(shape, values).unwrap()
    }

    /// Draw an index from an explicit probability vector. Weights must be
    /// finite, non-negative, and sum to 1 within 1e-6.
    pub fn categorical(&mut self, probs: &[f64]) -> Result<usize, SampleError> {
        let mut sum = 0.0;
        let mut support = false;
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(SampleError::BadWeight { index, value });
            }
            if value > 0.0 {
                support = true;
            }
            sum += value;
        }
        if !support {
            return Err(SampleError::EmptySupport);
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(SampleError::BadSum { sum });
        }
        let u = self.uniform() * sum;
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
        // Rounding pushed u past the final cumulative value.
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_derivation_same_stream() {
        let mut a = SeededRng::derive(7, "episodes", &[3, 1]);
        let mut b = SeededRng::derive(7, "episodes", &[3, 1]);
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_labels_diverge() {
        let mut a = SeededRng::derive(7, "episodes", &[0]);
        let mut b = SeededRng::derive(7, "init", &[0]);
        let same = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn index_position_matters() {
        let mut a = SeededRng::derive(7, "x", &[1, 0]);
        let mut b = SeededRng::derive(7, "x", &[0, 1]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut rng = SeededRng::from_root(42);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn normal_moments() {
        let mut rng = SeededRng::from_root(9);
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn categorical_rejects_bad_inputs() {
        let mut rng = SeededRng::from_root(1);
        assert_eq!(
            rng.categorical(&[0.5, -0.1, 0.6]),
            Err(SampleError::BadWeight { index: 1, value: -0.1 })
        );
        assert_eq!(rng.categorical(&[0.0, 0.0]), Err(SampleError::EmptySupport));
        assert!(matches!(rng.categorical(&[0.3, 0.3]), Err(SampleError::BadSum { .. })));
    }

    #[test]
    fn categorical_frequencies_track_weights() {
        let mut rng = SeededRng::from_root(5);
        let probs = [0.2, 0.5, 0.3];
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            counts[rng.categorical(&probs).unwrap()] += 1;
        }
        for i in 0..3 {
            let freq = counts[i] as f64 / n as f64;
            assert!((freq - probs[i]).abs() < 0.01, "index {i}: {freq}");
        }
    }

    #[test]
    fn sample_indices_distinct() {
        let mut rng = SeededRng::from_root(11);
        let s = rng.sample_indices(50, 12);
        let mut sorted = s.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 12);
    }
}
