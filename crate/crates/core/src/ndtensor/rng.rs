use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::{Scalar, Tensor};

/// Seedable generator with a fixed, platform-independent stream.
///
/// Uniforms come from ChaCha8 (64-bit seed expanded by `seed_from_u64`,
/// optional 64-bit stream id). Standard normals use the Marsaglia polar
/// method: draw `u, v` uniform on (-1, 1) until `s = u² + v² ∈ (0, 1)`, then
/// emit `u·m` and keep `v·m` for the next call, with `m = sqrt(-2 ln s / s)`.
#[derive(Clone, Debug)]
pub struct Rng {
    core: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream for the same seed (e.g. one per epoch).
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(seed);
        core.set_stream(stream);
        Self { core, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    /// Uniform on [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection (no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let r = self.next_u64();
            if r < zone {
                return (r % n) as usize;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * m);
                return u * m;
            }
        }
    }

    pub fn randn<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let len = shape.iter().product();
        let data = (0..len).map(|_| T::lift(self.normal())).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches buffer length")
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reseeding_reproduces_stream() {
        let a: Tensor<f64> = Rng::new(42).randn(&[4]);
        let b: Tensor<f64> = Rng::new(42).randn(&[4]);
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_and_streams_differ() {
        let a: Tensor<f64> = Rng::new(1).randn(&[8]);
        let b: Tensor<f64> = Rng::new(2).randn(&[8]);
        let c: Tensor<f64> = Rng::with_stream(1, 1).randn(&[8]);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments() {
        // 3-sigma bands: sd(mean) = 1e-3, sd(var) = sqrt(2/n) ~ 1.4e-3
        let mut rng = Rng::new(7);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn below_stays_in_range_and_hits_every_value() {
        let mut rng = Rng::new(3);
        let mut seen = [false; 5];
        for _ in 0..1000 {
            let k = rng.below(5);
            seen[k] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = Rng::new(11);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
