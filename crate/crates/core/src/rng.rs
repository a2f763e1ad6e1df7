//! Seed derivation.
//!
//! Every random stream in a run descends from one root seed. A stream is
//! identified by a fixed label (`"dataset"`, `"noise"`, `"init/G/2"`, ...) and
//! its seed is a pure function of `(root, label)`, so adding a new stream never
//! perturbs the existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every stream. ChaCha8 output is specified and
/// platform independent, which keeps runs bit-reproducible.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed of the stream `label` under `root`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(splitmix64(root) ^ fnv1a(label))
}

/// Rng for the stream `label` under `root`.
pub fn stream(root: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, label))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
