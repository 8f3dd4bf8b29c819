//! Deterministic seedable PRNG and Gaussian sampling.
//!
//! The generator is xoshiro256++ with its 256-bit state expanded from a
//! 64-bit user seed via splitmix64, so a seed produces the same scalar
//! sequence on every platform.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ generator. Single-owner: one instance must not be shared
/// across threads mid-stream.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform double in `[0, 1)` from the top 53 bits of the stream.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform integer in `[0, n)`.
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below requires n > 0");
        (self.next_u64() % n as u64) as usize
    }

    /// One standard-normal pair via the Box-Muller transform.
    /// `u1` is mapped into `(0, 1]` so the logarithm stays finite.
    pub fn next_gaussian_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        (radius * angle.cos(), radius * angle.sin())
    }
}

/// Tensor of i.i.d. standard-normal entries, deterministic given the
/// generator state. Odd element counts discard the trailing half-pair.
pub fn gaussian_sample<S: Scalar>(rng: &mut Rng, shape: impl Into<Vec<usize>>) -> Result<Tensor<S>> {
    let shape = shape.into();
    let probe = Tensor::<S>::zeros(shape.clone())?;
    let n = probe.len();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let (a, b) = rng.next_gaussian_pair();
        data.push(S::from_f64_c(a));
        if data.len() < n {
            data.push(S::from_f64_c(b));
        }
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    // First 16 outputs for each seed, frozen from an independent
    // transcription of the reference splitmix64 + xoshiro256++ algorithms.
    const GOLDEN_SEED0: [u64; 16] = [
        0x53175d61490b23df,
        0x61da6f3dc380d507,
        0x5c0fdf91ec9a7bfc,
        0x02eebf8c3bbe5e1a,
        0x7eca04ebaf4a5eea,
        0x0543c37757f08d9a,
        0xdb7490c75ab5026e,
        0xd87343e6464bc959,
        0x4b7da0a02389f0ff,
        0x1300fc58c0424c16,
        0x5084843206c19968,
        0x10ea073de9aa4dfc,
        0x1aae554343960cc1,
        0x1804139f10fae720,
        0x10d790e7b8ac10fa,
        0x667d2bffdd1496f7,
    ];
    const GOLDEN_SEED42: [u64; 16] = [
        0xd0764d4f4476689f,
        0x519e4174576f3791,
        0xfbe07cfb0c24ed8c,
        0xb37d9f600cd835b8,
        0xcb231c3874846a73,
        0x968d9f004e50de7d,
        0x201718ff221a3556,
        0x9ae94e070ed8cb46,
        0x352cf3daf095ccc7,
        0xeeefd63219b4a0d4,
        0x8f3dfa98020e7942,
        0xd99b8e00792f360d,
        0xae14e77054359b98,
        0x11ccbfbb36590dbd,
        0x672fcfd4efd0e0bd,
        0x8bc6e858d0501168,
    ];

    #[test]
    fn golden_stream_seed0() {
        let mut rng = Rng::new(0);
        for &expect in &GOLDEN_SEED0 {
            assert_eq!(rng.next_u64(), expect);
        }
    }

    #[test]
    fn golden_stream_seed42() {
        let mut rng = Rng::new(42);
        for &expect in &GOLDEN_SEED42 {
            assert_eq!(rng.next_u64(), expect);
        }
    }

    #[test]
    fn same_seed_same_tensor() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        let ta: Tensor<f64> = gaussian_sample(&mut a, vec![2, 2]).unwrap();
        let tb: Tensor<f64> = gaussian_sample(&mut b, vec![2, 2]).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn gaussian_moments_at_1e5_samples() {
        let mut rng = Rng::new(0);
        let t: Tensor<f64> = gaussian_sample(&mut rng, vec![100_000]).unwrap();
        let mean = t.mean();
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn next_f64_range() {
        let mut rng = Rng::new(3);
        for _ in 0..1000 {
            let v = rng.next_f64();
            assert!((0.0..1.0).contains(&v));
        }
    }
}
