//! Seeded random streams.
//!
//! Every stochastic component draws from ChaCha8 (`rand_chacha::ChaCha8Rng`)
//! seeded through `seed_from_u64`, whose output is specified independently
//! of platform and word size. Uniform reals use `rand`'s `Standard` f64
//! distribution (53 random mantissa bits, range `[0, 1)`).
//!
//! Sub-streams (per step, per image, per level) are keyed with
//! [`derive_seed`], a SplitMix64 fold over the parent seed and the keys.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Scalar, Shape4, Tensor4};

pub type StreamRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically derives a child seed from `seed` and a key path.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn tensor_uniform<T: Scalar>(shape: Shape4, seed: u64, lo: f64, hi: f64) -> Tensor4<T> {
    let mut rng = seeded(seed);
    let data = (0..shape.numel())
        .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi)))
        .collect();
    Tensor4::from_vec(shape, data).expect("length matches shape")
}
