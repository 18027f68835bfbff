//! Seeded randomness. Every stochastic operation takes an explicit generator;
//! independent streams are derived from (seed, stream index) so results are
//! reproducible and order-stable regardless of execution interleaving.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

/// SplitMix64 finalizer; decorrelates nearby seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for stream `idx` of a base seed.
pub fn stream(seed: u64, idx: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(idx)))
}

/// Standard normal draws in row-major order.
pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).expect("randn shape")
}

/// Uniform draws in [lo, hi).
pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("rand_uniform shape")
}
