//! Seeded deterministic random generator.
//!
//! The generator is xoshiro256++ with its state expanded from a 64-bit seed
//! by SplitMix64. Both algorithms are pure integer arithmetic, so a given
//! seed produces a bit-identical output sequence on every platform. All
//! stochasticity in the crate (weight init, epoch shuffling, dropout masks,
//! synthetic data) flows from one root seed through named substreams.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const F64_SCALE: f64 = 1.0 / (1u64 << 53) as f64;

/// Deterministic generator state. Exclusive-access: never share one
/// instance across concurrent callers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    s: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1F4B_7E55);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl RngState {
    /// Seed a fresh generator. The four xoshiro words are the first four
    /// SplitMix64 outputs for `seed`.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for w in &mut s {
            *w = splitmix64(&mut sm);
        }
        if s == [0, 0, 0, 0] {
            // xoshiro must not start from the all-zero state
            s[0] = 1;
        }
        RngState { s }
    }

    /// Derive an independent, named substream of a root seed. Streams with
    /// distinct tags never interleave, so consuming draws on one stream
    /// leaves every other stream untouched.
    pub fn substream(root_seed: u64, tag: &str) -> Self {
        Self::new(root_seed ^ fnv1a(tag.as_bytes()))
    }

    /// xoshiro256++ step.
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

    /// Uniform in [0,1): the top 53 bits scaled by 2^-53.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * F64_SCALE
    }

    /// Uniform integer in [0, bound). Plain modulo; the bias is below
    /// 2^-47 for every bound used in this crate.
    pub fn next_below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "next_below requires a positive bound");
        (self.next_u64() % bound as u64) as usize
    }

    /// Standard normal via Box-Muller. Consumes two draws and discards the
    /// second variate so the stream position stays a pure function of the
    /// call count.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * F64_SCALE; // (0,1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Sampling distribution for [`draw`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    /// Uniform over [low, high).
    Uniform { low: f64, high: f64 },
    /// 1.0 with probability p, else 0.0.
    Bernoulli { p: f64 },
}

/// Fill a rows x cols tensor from `dist`, advancing `rng` by exactly one
/// draw per element in row-major order.
pub fn draw(rng: &mut RngState, rows: usize, cols: usize, dist: Distribution) -> Result<Tensor> {
    match dist {
        Distribution::Uniform { low, high } => {
            if !(low.is_finite() && high.is_finite() && low < high) {
                return Err(Error::Config(format!(
                    "uniform bounds must be finite with low < high, got [{low}, {high})"
                )));
            }
            let span = high - low;
            let data = (0..rows * cols)
                .map(|_| {
                    let v = low + rng.next_f64() * span;
                    // rounding can land exactly on `high` for extreme spans
                    if v >= high {
                        high.next_down()
                    } else {
                        v
                    }
                })
                .collect();
            Tensor::from_vec(rows, cols, data)
        }
        Distribution::Bernoulli { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "bernoulli probability must lie in [0,1], got {p}"
                )));
            }
            let data = (0..rows * cols)
                .map(|_| if rng.next_f64() < p { 1.0 } else { 0.0 })
                .collect();
            Tensor::from_vec(rows, cols, data)
        }
    }
}
