//! Seedable, splittable random streams.
//!
//! Every random draw in the pipeline comes from a substream keyed by a
//! tuple of integers, e.g. `(seed, purpose, view, step)`. Adding views or
//! reordering work never perturbs the draws of an unrelated key.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// Purpose tags used as the first key component after the seed.
pub mod purpose {
    pub const INIT_NOISE: u64 = 1;
    pub const STEP_NOISE: u64 = 2;
    pub const INPUT_NOISE: u64 = 3;
    pub const FIRST_PASS_NOISE: u64 = 4;
    pub const TRAIN_TIMESTEP: u64 = 5;
    pub const TRAIN_NOISE: u64 = 6;
    pub const TRAIN_SHUFFLE: u64 = 7;
    pub const PARAM_INIT: u64 = 8;
    pub const SHAPE: u64 = 9;
    pub const SUBSAMPLE: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds the generator for the stream identified by `seed` and `key`.
pub fn substream(seed: u64, key: &[u64]) -> StreamRng {
    let mut seed_bytes = [0u8; 32];
    let mut h = splitmix64(seed);
    for (lane, chunk) in seed_bytes.chunks_mut(8).enumerate() {
        let mut acc = h ^ (lane as u64).wrapping_mul(0xA24B_AED4_963E_E407);
        for &k in key {
            acc = splitmix64(acc ^ splitmix64(k.wrapping_add(lane as u64)));
        }
        chunk.copy_from_slice(&acc.to_le_bytes());
        h = splitmix64(h);
    }
    ChaCha8Rng::from_seed(seed_bytes)
}

/// Fills `out` with independent standard normal draws.
pub fn fill_normal(rng: &mut StreamRng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

pub fn normal_vec(rng: &mut StreamRng, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    fill_normal(rng, &mut v);
    v
}
