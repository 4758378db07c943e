//! Seeded inputs shared by the benchmarks.

use bittrace_core::{PTensor, Precision};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform values in [-1, 1] with random bit counts below the maximum.
pub fn random_tensor(shape: &[usize], p: Precision, seed: u64) -> PTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| p.round(rng.gen_range(-1.0..1.0))).collect();
    let bits = (0..n).map(|_| rng.gen_range(p.max_bits() / 2..p.max_bits())).collect();
    PTensor::from_parts(shape, values, bits, p).expect("finite values and valid bits")
}
