//! Deterministic pseudo-random streams.
//!
//! Every stochastic piece of the pipeline (weight init, gate noise, data
//! generation, shuffling) draws from its own [`Stream`], so ablations perturb
//! only the stream they touch. The generator is xorshift64*, a 64-bit-state
//! xorshift with a multiplicative output scramble:
//!
//! ```text
//! x ^= x >> 12;  x ^= x << 25;  x ^= x >> 27;
//! output = x * 0x2545F4914F6CDD1D
//! ```
//!
//! Seeds are pre-mixed through one round of SplitMix64
//! (increment 0x9E3779B97F4A7C15) so that adjacent user seeds land in
//! uncorrelated regions of the state space. Both constant sets are fixed by
//! this crate's file formats: datasets regenerate byte-exactly from
//! `(seed, sizes)` alone.

use crate::scalar::Scalar;

/// A single xorshift64* stream.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Stream {
    state: u64,
}

const SPLITMIX_INC: u64 = 0x9E37_79B9_7F4A_7C15;
const XORSHIFT_MUL: u64 = 0x2545_F491_4F6C_DD1D;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(SPLITMIX_INC);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        // xorshift64* requires nonzero state; the splitmix scramble of any
        // seed is nonzero except for one input, which we nudge.
        let mixed = splitmix64(seed);
        Stream {
            state: if mixed == 0 { SPLITMIX_INC } else { mixed },
        }
    }

    /// Derive an independent child stream, e.g. one per sample id.
    pub fn derive(&self, tag: u64) -> Stream {
        Stream::new(splitmix64(self.state ^ splitmix64(tag)))
    }

    /// Raw state, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Self {
        Stream {
            state: if state == 0 { SPLITMIX_INC } else { state },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(XORSHIFT_MUL)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_f64() * n as f64) as usize % n.max(1)
    }

    /// Standard normal via the Box-Muller transform. One value per call;
    /// the second value of each pair is discarded to keep the stream's
    /// consumption rate independent of call parity.
    pub fn normal(&mut self) -> f64 {
        let u1 = (1.0 - self.next_f64()).max(f64::MIN_POSITIVE);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal truncated to [-2σ, 2σ] by resampling, the initializer used for
    /// all backbone and expert weights (std 0.02 in the presets).
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let v = self.normal();
            if v.abs() <= 2.0 {
                return v * std;
            }
        }
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T], std: f64) {
        for v in out {
            *v = T::from_f64(self.normal() * std);
        }
    }

    pub fn fill_trunc_normal<T: Scalar>(&mut self, out: &mut [T], std: f64) {
        for v in out {
            *v = T::from_f64(self.trunc_normal(std));
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
