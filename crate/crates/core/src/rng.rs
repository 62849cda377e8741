//! Seeding helpers.
//!
//! Every trajectory gets its own generator derived from `(seed, index)`, so
//! a batch produces the same numbers no matter how it is scheduled across
//! threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type FlowRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for a single run seed.
pub fn rng_from_seed(seed: u64) -> FlowRng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed))
}

/// Generator for stream `index` of run `seed`.
pub fn stream_rng(seed: u64, index: u64) -> FlowRng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}
