//! Seeded random source with a fixed, documented algorithm.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): a 64-bit counter
//! advanced by the golden-ratio increment and finalized with two
//! xor-shift-multiply rounds. Uniform doubles take the top 53 bits of the
//! output; normal variates use the Marsaglia polar method with the spare
//! variate cached. Every sample is therefore a pure function of the seed and
//! the call sequence, bit-identical on all platforms.

use crate::tensor::{Real, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct RandomSource {
    state: u64,
    spare_normal: Option<f64>,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare_normal: None,
        }
    }

    /// Independent source for a numbered substream of `seed`. Mixes the
    /// stream index through the output function before seeding, so adjacent
    /// indices give unrelated streams.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let mixed = mix(seed ^ mix(stream.wrapping_add(GOLDEN)));
        Self::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound).
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        // Modulo bias is negligible for the desk-scale bounds used here.
        (self.next_u64() % bound as u64) as usize
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via the polar method. Generates pairs; the unused
    /// variate is returned on the next call.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let m = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * m);
                return u * m;
            }
        }
    }

    /// Tensor of i.i.d. standard normal entries. `f32` tensors are filled by
    /// rounding the `f64` stream, so the draw order is precision-independent.
    pub fn normal_tensor<T: Real>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| T::from_f64(self.normal())).collect();
        Tensor::from_vec(shape, data).expect("shape/data agree by construction")
    }

    pub fn uniform_tensor<T: Real>(&mut self, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(self.uniform_in(lo, hi)))
            .collect();
        Tensor::from_vec(shape, data).expect("shape/data agree by construction")
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
