//! Independent, reproducible random streams derived from one base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags that keep streams for different consumers disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Mask = 3,
    Augment = 4,
    Patchify = 5,
    Synth = 6,
    FiniteDiff = 7,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `tags` into `seed` with a SplitMix64 finalizer per step.
pub fn stream_seed(seed: u64, purpose: Purpose, tags: &[u64]) -> u64 {
    let mut h = mix(seed ^ mix(purpose as u64));
    for &t in tags {
        h = mix(h ^ mix(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream_rng(seed: u64, purpose: Purpose, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, purpose, tags))
}
