//! Seed management and summation helpers shared across the crate.
//!
//! All randomness in the crate flows from a single root seed through
//! [`mix`]/[`split_seed`]; no component reads ambient entropy. Re-running any
//! computation with the same root seed reproduces it bit for bit.

use crate::Real;

/// SplitMix64 finalizer. Decorrelates a seed and a stream index.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a path of indices.
///
/// This is the crate-wide seed-splitting rule: the sample `s` of training
/// iteration `j` uses `split_seed(root, &[j, s, STREAM])`, scenario `s` of a
/// sweep uses `split_seed(root, &[s, STREAM])`, and so on. Children derived
/// through distinct paths are statistically independent.
pub fn split_seed(root: u64, path: &[u64]) -> u64 {
    let mut s = root;
    for &p in path {
        s = mix(s, p);
    }
    s
}

/// Stream tags used with [`split_seed`] so that different consumers of the
/// same scenario seed never share a stream.
pub mod stream {
    pub const NOISE: u64 = 0x01;
    pub const LOSS: u64 = 0x02;
    pub const IMPULSE: u64 = 0x03;
    pub const DELAYS: u64 = 0x04;
    pub const SPHERE: u64 = 0x05;
    pub const EVAL: u64 = 0x06;
    pub const REFRESH: u64 = 0x07;
    pub const SCENARIO: u64 = 0x08;
    pub const PERTURB: u64 = 0x09;
}

/// Neumaier compensated accumulator.
///
/// Reductions over parallel-map results are performed in canonical index
/// order with this accumulator, which keeps averages deterministic and
/// accurate regardless of the worker schedule.
#[derive(Clone, Copy, Debug)]
pub struct CompensatedSum<T> {
    sum: T,
    compensation: T,
}

impl<T: Real> Default for CompensatedSum<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> CompensatedSum<T> {
    pub fn new() -> Self {
        Self {
            sum: T::zero(),
            compensation: T::zero(),
        }
    }

    pub fn add(&mut self, x: T) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> T {
        self.sum + self.compensation
    }
}

/// Compensated sum of an iterator in its given order.
pub fn compensated_sum<T: Real>(values: impl IntoIterator<Item = T>) -> T {
    let mut acc = CompensatedSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

/// Compensated mean; zero for an empty input.
pub fn compensated_mean<T: Real>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    compensated_sum(values.iter().copied()) / crate::real::<T>(values.len() as f64)
}
